"""Optimizer, learning-rate schedule, parameter freezing, the multi-pass
training protocol, and the five-system ablation runner.

The protocol trains one model in stages:

    A1  pre-train on non-accented data only
    A2  initialize from A1, freeze the general encoder, adapt the accent
        path on the small accented corpus
    A3  initialize from A2, re-train everything on the pooled data

plus two reference systems: a pooled-data pretrain from scratch, and a
single-encoder baseline that is pre-trained then fully finetuned on the
accented data. Every run is a pure function of (seed, config, corpora).
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import numerics as nm
from .data import Tokenizer, cmvn, AccentSpec, generate_corpus, load_corpus_list
from .model import (AformerModel, ModelConfig, ConfigError, utterance_loss,
                    save_checkpoint, model_from_checkpoint, PASS_IDS,
                    GENERAL_PREFIX)

PRETRAIN_PASSES = ("A1", "pooled-pretrain")


class TrainError(RuntimeError):
    """Training cannot proceed (missing corpus, bad pass wiring)."""


class Adam:
    """Bias-corrected Adam. Frozen parameters receive no updates and no
    moment state is ever allocated for them."""

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, frozen=()):
        self.params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.frozen = set(frozen)
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            if name in self.frozen or p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(np.float32)


def warmup_lr(step: int, warmup_steps: int, base: float = 1.0, d_model: int = 32) -> float:
    """Inverse-sqrt schedule with linear warmup:
    base * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5).
    Peaks exactly at step == warmup_steps."""
    if step < 1:
        raise ConfigError(f"schedule step must be >= 1, got {step}")
    if warmup_steps < 1:
        raise ConfigError(f"warmup_steps must be >= 1, got {warmup_steps}")
    return base * d_model ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)


def apply_freeze(model: AformerModel, prefixes) -> list[str]:
    """Resolve name prefixes to the frozen parameter-name list. A prefix that
    matches nothing is a configuration error."""
    names = [n for n, _ in model.named_parameters()]
    frozen: set[str] = set()
    for prefix in prefixes:
        hit = [n for n in names if n == prefix or n.startswith(prefix.rstrip(".") + ".")]
        if not hit:
            raise ConfigError(f"freeze prefix {prefix!r} matches no parameter")
        frozen.update(hit)
    return sorted(frozen)


@dataclass
class PassSpec:
    pass_id: str
    corpora: list[str]                 # corpus tags, resolved by the caller
    steps: int
    batch_size: int = 16
    warmup: int = 120
    base_lr: float = 0.5
    init_from: str | None = None       # checkpoint path
    freeze_prefixes: tuple[str, ...] = ()
    seed: int = 0
    ctc_weight: float | None = None    # None -> model config value
    weights: dict[str, float] | None = None  # per-corpus sampling weights

    def validate(self):
        if self.pass_id not in PASS_IDS:
            raise ConfigError(f"unknown pass id {self.pass_id!r}, expected one of {PASS_IDS}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if not self.corpora:
            raise ConfigError("pass needs at least one corpus tag")
        if self.pass_id in PRETRAIN_PASSES and self.init_from is not None:
            raise ConfigError(f"pass {self.pass_id} starts from scratch; drop init_from")
        if self.pass_id in ("A2", "A3", "finetune", "A2-finetune") and self.init_from is None:
            raise ConfigError(f"pass {self.pass_id} requires an init checkpoint")
        if self.pass_id == "A2" and GENERAL_PREFIX not in tuple(self.freeze_prefixes):
            raise ConfigError("pass A2 must freeze the general-encoder prefix")


@dataclass
class RunManifest:
    pass_id: str
    lineage: list[str]
    seed: int
    config: dict
    config_hash: str
    init_from: str | None
    steps: int
    first_loss: float | None
    final_loss: float | None
    checkpoint: str
    log_file: str
    frozen: list[str]
    wall_seconds: float
    metrics: dict = field(default_factory=dict)

    def save(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def config_hash(cfg: ModelConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class PreparedUtterance:
    id: str
    tag: str
    feats: np.ndarray
    targets: list[int]


def prepare_records(records, tokenizer: Tokenizer, normalize: bool = True) -> list[PreparedUtterance]:
    out = []
    for r in records:
        feats = cmvn(r.features) if normalize else np.asarray(r.features, dtype=np.float32)
        out.append(PreparedUtterance(id=r.id, tag=r.corpus_tag, feats=feats,
                                     targets=tokenizer.tokenize(r.tokens)))
    return out


def batch_stream(prepared: list[PreparedUtterance], batch_size: int, seed: int,
                 weights: dict[str, float] | None = None):
    """Endless batch iterator. Default: length-sorted buckets whose order is
    reshuffled each epoch with a seeded generator, so every utterance (and
    corpus tag) appears once per epoch. Weighted mode samples utterances
    i.i.d. proportional to their corpus weight."""
    rng = np.random.default_rng(seed)
    n = len(prepared)
    if weights is not None:
        w = np.array([weights.get(p.tag, 1.0) for p in prepared], dtype=np.float64)
        probs = w / w.sum()
        while True:
            idx = rng.choice(n, size=batch_size, p=probs)
            yield [prepared[i] for i in idx]
    order = sorted(range(n), key=lambda i: (prepared[i].feats.shape[0], prepared[i].id))
    buckets = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    while True:
        for bi in rng.permutation(len(buckets)):
            yield [prepared[i] for i in buckets[bi]]


def run_pass(spec: PassSpec, corpora: dict[str, list], out_dir,
             config: ModelConfig | None = None,
             tokenizer: Tokenizer | None = None):
    """Execute one training pass; returns (model, RunManifest). Writes the
    checkpoint, a JSON manifest, and a line-delimited step log (one JSON
    record per step: step, pass, loss components, lr, corpus tags)."""
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tokenizer = tokenizer or Tokenizer()
    missing = [t for t in spec.corpora if t not in corpora]
    if missing:
        raise TrainError(f"corpus tag(s) not found: {missing}; have {sorted(corpora)}")

    if spec.init_from is not None:
        model, parent_meta = model_from_checkpoint(spec.init_from, seed=spec.seed)
        parent_lineage = list(parent_meta.get("extra", {}).get("lineage", [parent_meta["pass_id"]]))
        if spec.pass_id == "A3" and parent_meta["pass_id"] != "A2":
            raise ConfigError(f"pass A3 must initialize from an A2 checkpoint, got {parent_meta['pass_id']!r}")
        lineage = parent_lineage + [spec.pass_id]
    else:
        if config is None:
            raise ConfigError(f"pass {spec.pass_id} starts from scratch and needs a model config")
        model = AformerModel(config, seed=spec.seed)
        lineage = [spec.pass_id]

    prepared = []
    for tag in spec.corpora:
        prepared.extend(prepare_records(corpora[tag], tokenizer))
    frozen = apply_freeze(model, spec.freeze_prefixes)
    opt = Adam(model.named_parameters(), frozen=frozen)
    batches = batch_stream(prepared, spec.batch_size, spec.seed, weights=spec.weights)

    log_path = out_dir / f"{spec.pass_id}-steps.jsonl"
    first_loss = final_loss = None
    t0 = time.monotonic()
    with open(log_path, "w") as log:
        for step in range(1, spec.steps + 1):
            batch = next(batches)
            for _, p in opt.params:
                p.zero_grad()
            total = None
            att_sum = ctc_sum = 0.0
            for utt in batch:
                bl = utterance_loss(model, utt.feats, utt.targets, train=True,
                                    ctc_weight=spec.ctc_weight)
                att_sum += bl.att_value
                ctc_sum += bl.ctc_value
                total = bl.total if total is None else total + bl.total
            total = total / float(len(batch))
            nm.backward(total)
            lr = warmup_lr(step, spec.warmup, spec.base_lr, d_model=model.config.d_model)
            opt.step(lr)
            loss_val = float(total.item())
            if first_loss is None:
                first_loss = loss_val
            final_loss = loss_val
            log.write(json.dumps({
                "step": step, "pass": spec.pass_id, "loss": loss_val,
                "att": att_sum / len(batch), "ctc": ctc_sum / len(batch),
                "lr": lr, "tags": sorted({u.tag for u in batch}),
            }) + "\n")

    ckpt_path = out_dir / f"{spec.pass_id}.ckpt"
    save_checkpoint(ckpt_path, model, spec.pass_id, spec.steps,
                    extra={"lineage": lineage, "seed": spec.seed})
    manifest = RunManifest(
        pass_id=spec.pass_id, lineage=lineage, seed=spec.seed,
        config=model.config.to_dict(), config_hash=config_hash(model.config),
        init_from=str(spec.init_from) if spec.init_from else None,
        steps=spec.steps, first_loss=first_loss, final_loss=final_loss,
        checkpoint=str(ckpt_path), log_file=str(log_path), frozen=frozen,
        wall_seconds=time.monotonic() - t0)
    manifest.save(out_dir / f"{spec.pass_id}.manifest.json")
    return model, manifest


def read_step_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# -- ablation ------------------------------------------------------------------


@dataclass
class AblationSettings:
    """Desk-scale defaults: small model, heavily imbalanced corpora
    (18:1 non-accented vs accented), a held-in accent and a held-out accent."""

    seed: int = 11
    n_train_clean: int = 3600
    n_train_accent: int = 200
    n_test_clean: int = 120
    n_test_accent: int = 120
    n_test_accent_ood: int = 120
    feat_dim: int = 16
    noise_level: float = 0.3
    accent_strength: float = 0.6
    accent_stretch: float = 1.25
    # a full-strength unseen rotation is chance level for every desk-scale
    # system; a milder held-out accent keeps the cross-system comparison
    # informative
    accent_ood_strength: float = 0.1
    steps_pretrain: int = 1200
    steps_adapt: int = 250
    steps_retrain: int = 150
    steps_finetune: int = 200
    batch_size: int = 16
    warmup: int = 120
    base_lr: float = 0.5
    beam: int = 4
    decode_ctc_weight: float = 0.3
    max_eval_utts: int | None = None


TEST_SETS = ("test-clean", "test-accent", "test-accent-ood")


def build_task_corpora(out_dir, s: AblationSettings, tokenizer: Tokenizer):
    """Generate the train/test corpora of the synthetic task; returns
    {tag: [UtteranceRecord]}. In-domain and out-of-domain accents come from
    the same family but different draws (the held-out one milder by default)."""
    out_dir = Path(out_dir)
    accent_in = AccentSpec.sample("accent-in", s.seed + 900, s.feat_dim,
                                  tokenizer.n_symbols, strength=s.accent_strength,
                                  stretch=s.accent_stretch)
    accent_ood = AccentSpec.sample("accent-ood", s.seed + 901, s.feat_dim,
                                   tokenizer.n_symbols, strength=s.accent_ood_strength,
                                   stretch=s.accent_stretch)
    plan = [
        ("train-clean", s.n_train_clean, None, s.seed + 1),
        ("train-accent", s.n_train_accent, accent_in, s.seed + 2),
        ("test-clean", s.n_test_clean, None, s.seed + 3),
        ("test-accent", s.n_test_accent, accent_in, s.seed + 4),
        ("test-accent-ood", s.n_test_accent_ood, accent_ood, s.seed + 5),
    ]
    corpora = {}
    for tag, n, accent, seed in plan:
        path = out_dir / f"{tag}.afc"
        generate_corpus(path, tag, seed, n, accent, tokenizer=tokenizer,
                        feat_dim=s.feat_dim, proto_seed=s.seed,
                        noise_level=s.noise_level)
        corpora[tag] = load_corpus_list(path)
    return corpora


def run_ablation(out_dir, settings: AblationSettings | None = None,
                 config: ModelConfig | None = None,
                 corpora: dict | None = None) -> dict:
    """Train and evaluate the five systems:

      a1        pre-train on non-accented data only
      a2        pooled-data pre-train from scratch
      b         a1 + frozen-general adaptation on accented data
      c         full three-pass protocol (a1 -> b -> pooled re-train)
      finetune  accent-path-disabled baseline, pre-trained then fully
                finetuned on accented data

    Returns the report dict (also written to disk by the caller via report.py);
    includes per-system per-test-set error rates and the tracked directional
    comparisons.
    """
    from .scoring import evaluate_model  # late import; scoring pulls in decode

    s = settings or AblationSettings()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tokenizer = Tokenizer()
    cfg = config or ModelConfig(vocab_size=tokenizer.vocab_size, feat_dim=s.feat_dim)
    if corpora is None:
        corpora = build_task_corpora(out_dir / "corpora", s, tokenizer)

    common = dict(batch_size=s.batch_size, warmup=s.warmup, base_lr=s.base_lr, seed=s.seed)
    systems: dict[str, dict] = {}

    def evaluate(model) -> dict:
        metrics = {}
        for ts in TEST_SETS:
            recs = corpora[ts]
            if s.max_eval_utts is not None:
                recs = recs[: s.max_eval_utts]
            rep = evaluate_model(model, recs, tokenizer, beam=s.beam,
                                 ctc_weight=s.decode_ctc_weight)
            metrics[ts] = rep.to_dict()
        return metrics

    def record(name, model, manifest, extra_lineage=()):
        t0 = time.monotonic()
        metrics = evaluate(model)
        manifest.metrics = metrics
        manifest.save(out_dir / name / f"{manifest.pass_id}.manifest.json")
        systems[name] = {
            "pass_id": manifest.pass_id,
            "lineage": manifest.lineage,
            "checkpoint": manifest.checkpoint,
            "log_file": manifest.log_file,
            "train_seconds": manifest.wall_seconds,
            "eval_seconds": time.monotonic() - t0,
            "first_loss": manifest.first_loss,
            "final_loss": manifest.final_loss,
            "metrics": metrics,
        }

    # a1: non-accented pretrain (the anchor for b and c)
    m_a1, man_a1 = run_pass(
        PassSpec("A1", ["train-clean"], s.steps_pretrain, **common),
        corpora, out_dir / "a1", config=cfg, tokenizer=tokenizer)
    record("a1", m_a1, man_a1)

    # a2: pooled-data pretrain from scratch
    m_a2, man_a2 = run_pass(
        PassSpec("pooled-pretrain", ["train-clean", "train-accent"], s.steps_pretrain, **common),
        corpora, out_dir / "a2", config=cfg, tokenizer=tokenizer)
    record("a2", m_a2, man_a2)

    # b: frozen-general adaptation of a1 on the small accented corpus
    m_b, man_b = run_pass(
        PassSpec("A2", ["train-accent"], s.steps_adapt,
                 init_from=str(out_dir / "a1" / "A1.ckpt"),
                 freeze_prefixes=(GENERAL_PREFIX,), **common),
        corpora, out_dir / "b", tokenizer=tokenizer)
    record("b", m_b, man_b)

    # c: pooled retrain of b (full protocol)
    m_c, man_c = run_pass(
        PassSpec("A3", ["train-clean", "train-accent"], s.steps_retrain,
                 init_from=str(out_dir / "b" / "A2.ckpt"), **common),
        corpora, out_dir / "c", tokenizer=tokenizer)
    record("c", m_c, man_c)

    # finetune baseline: single-encoder model, pretrain then full finetune
    base_cfg = ModelConfig(**{**cfg.to_dict(), "accent_enabled": False})
    _, man_fb = run_pass(
        PassSpec("A1", ["train-clean"], s.steps_pretrain, **common),
        corpora, out_dir / "finetune-pre", config=base_cfg, tokenizer=tokenizer)
    m_ft, man_ft = run_pass(
        PassSpec("finetune", ["train-accent"], s.steps_finetune,
                 init_from=str(out_dir / "finetune-pre" / "A1.ckpt"), **common),
        corpora, out_dir / "finetune", tokenizer=tokenizer)
    record("finetune", m_ft, man_ft)

    def rate(name, ts):
        return systems[name]["metrics"][ts]["error_rate"]

    def rel_gain(base, new):
        return (base - new) / base if base > 0 else 0.0

    report = {
        "settings": asdict(s),
        "config": cfg.to_dict(),
        "test_sets": list(TEST_SETS),
        "systems": systems,
        # directional comparisons tracked (reported, not gated)
        "tracked": {
            "c_vs_a1_in_domain_rel_gain": rel_gain(rate("a1", "test-accent"), rate("c", "test-accent")),
            "c_vs_finetune_in_domain_rel_gain": rel_gain(rate("finetune", "test-accent"), rate("c", "test-accent")),
            "c_vs_finetune_ood_rel_gain": rel_gain(rate("finetune", "test-accent-ood"), rate("c", "test-accent-ood")),
            "c_vs_a1_clean_regression": rate("c", "test-clean") - rate("a1", "test-clean"),
        },
    }
    (out_dir / "ablation.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report
