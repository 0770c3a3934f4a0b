"""The full accent-aware encoder-decoder model plus its losses, joint
CTC/attention beam decoding, and checkpoint serialization.

Architecture per utterance (no padded batching at this scale):

    features (T, feat_dim)
      -> conv subsampling (~T/4) -> + positional encoding
      -> general encoder (conformer stack)   -> X_G
      -> accent encoder (transformer / LSTM) -> X_A
      -> fusion(X_G, X_A)                    -> X_F
      -> CTC head over X_F (blank training signal)
      -> autoregressive decoder attending over X_F (attention signal)

Training loss: (1 - w) * attention + w * ctc with w in [0, 1].
Decoding combines the same two scores over beam hypotheses.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import numerics as nm
from .numerics import Tensor, ShapeError, NumericError
from .layers import (Module, Linear, Conv2dSubsampling, causal_mask,
                     positional_encoding, xavier, LayerNorm, FeedForward,
                     MultiHeadAttention)
from .encoders import GeneralEncoder, build_accent_encoder
from .fusion import build_fusion, FUSION_KINDS

CHECKPOINT_MAGIC = b"AFMT"
CHECKPOINT_VERSION = 1
PASS_IDS = ("A1", "A2", "A2-finetune", "A3", "finetune", "pooled-pretrain")

GENERAL_PREFIX = "general"
ACCENT_PREFIX = "accent"


class ConfigError(ValueError):
    """Invalid model or run configuration."""


class CtcInfeasibleError(ValueError):
    """Target cannot be emitted in the available frames."""


class CheckpointError(ValueError):
    """Checkpoint file violates the on-disk format."""


@dataclass
class ModelConfig:
    vocab_size: int = 29          # blank + sos/eos + 27 characters
    feat_dim: int = 16
    d_model: int = 32
    n_heads: int = 2
    d_ff: int = 64
    n_general_blocks: int = 2
    conv_kernel: int = 7
    subsample_channels: int = 8
    accent_kind: str = "transformer"   # "transformer" | "lstm"
    accent_depth: int = 1
    lstm_hidden: int = 32
    fusion: str = "add"                # "add" | "concat" | "cross_attention"
    d_att: int = 32
    n_decoder_layers: int = 2
    dropout: float = 0.1
    label_smoothing: float = 0.1
    ctc_weight: float = 0.3
    accent_enabled: bool = True        # False: single-encoder baseline

    def __post_init__(self):
        if self.vocab_size < 3:
            raise ConfigError(f"vocab_size must be >= 3 (blank, sos/eos, one token), got {self.vocab_size}")
        if self.feat_dim < 7:
            raise ConfigError(f"feat_dim must be >= 7 for the conv frontend, got {self.feat_dim}")
        if self.d_model < 1 or self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model ({self.d_model}) must be a positive multiple of n_heads ({self.n_heads})")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ConfigError(f"ctc_weight must lie in [0, 1], got {self.ctc_weight}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.fusion not in FUSION_KINDS:
            raise ConfigError(f"unknown fusion {self.fusion!r}, expected one of {FUSION_KINDS}")
        if self.accent_kind not in ("transformer", "lstm"):
            raise ConfigError(f"unknown accent encoder kind {self.accent_kind!r}")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd and positive, got {self.conv_kernel}")
        if self.n_general_blocks < 0 or self.accent_depth < 1 or self.n_decoder_layers < 1:
            raise ConfigError("encoder/decoder depths out of range")
        if self.d_att < 1:
            raise ConfigError(f"d_att must be >= 1, got {self.d_att}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown model config keys: {sorted(bad)}")
        return cls(**d)


def desk_config(**overrides) -> ModelConfig:
    """Small configuration that trains in minutes on a CPU."""
    return ModelConfig(**overrides)


def full_scale_config(**overrides) -> ModelConfig:
    """Full-scale configuration (for parameter-count and wiring checks only;
    far too slow to train here)."""
    base = dict(vocab_size=5002, feat_dim=80, d_model=256, n_heads=4, d_ff=2048,
                n_general_blocks=12, conv_kernel=15, subsample_channels=256,
                accent_kind="transformer", accent_depth=4, lstm_hidden=256,
                fusion="add", d_att=256, n_decoder_layers=6)
    base.update(overrides)
    return ModelConfig(**base)


class DecoderLayer(Module):
    """Post-norm transformer decoder layer: masked self-attention,
    cross-attention over the encoder memory, then feed-forward."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, dropout: float, rng):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.ffn = FeedForward(d_model, d_ff, dropout, rng)
        self.norm1 = LayerNorm(d_model)
        self.norm2 = LayerNorm(d_model)
        self.norm3 = LayerNorm(d_model)
        self.dropout = dropout

    def forward(self, x: Tensor, memory: Tensor, mask: np.ndarray,
                train: bool = False, rng=None) -> Tensor:
        def drop(t):
            return nm.dropout(t, self.dropout, rng) if train else t

        x = self.norm1.forward(x + drop(self.self_attn.forward(x, x, mask=mask)))
        x = self.norm2.forward(x + drop(self.cross_attn.forward(x, memory)))
        x = self.norm3.forward(x + drop(self.ffn.forward(x, train=train, rng=rng)))
        return x


class Decoder(Module):
    """Autoregressive token decoder: embedding * sqrt(d) + positional
    encoding, a stack of DecoderLayers, and a vocabulary projection."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.embed = Tensor(xavier(rng, cfg.vocab_size, cfg.d_model), requires_grad=True)
        self.layers = [DecoderLayer(cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.dropout, rng)
                       for _ in range(cfg.n_decoder_layers)]
        self.out = Linear(cfg.d_model, cfg.vocab_size, rng)
        self.d_model = cfg.d_model
        self.dropout = cfg.dropout

    def forward(self, input_ids: list[int], memory: Tensor,
                train: bool = False, rng=None) -> Tensor:
        """input_ids (N,) -> logits (N, vocab); position i only sees ids <= i."""
        n = len(input_ids)
        x = nm.take_rows(self.embed, np.asarray(input_ids, dtype=np.int64))
        x = x * float(np.sqrt(self.d_model)) + positional_encoding(n, self.d_model)
        if train:
            x = nm.dropout(x, self.dropout, rng)
        mask = causal_mask(n)
        for layer in self.layers:
            x = layer.forward(x, memory, mask, train=train, rng=rng)
        return self.out.forward(x)


@dataclass
class ModelOutput:
    fused: Tensor        # (T', d_model) encoder memory after fusion
    ctc_logits: Tensor   # (T', vocab)
    dec_logits: Tensor | None  # (len(targets)+1, vocab) or None if no targets


class AformerModel(Module):
    """Dual-encoder (general + accent) speech-to-text model."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        cfg = config
        # attribute order fixes parameter enumeration order
        self.frontend = Conv2dSubsampling(cfg.feat_dim, cfg.d_model,
                                          cfg.subsample_channels, rng)
        self.general = GeneralEncoder(cfg.n_general_blocks, cfg.d_model, cfg.n_heads,
                                      cfg.d_ff, cfg.conv_kernel, cfg.dropout, rng)
        if cfg.accent_enabled:
            self.accent = build_accent_encoder(cfg.accent_kind, cfg.accent_depth,
                                               cfg.d_model, cfg.n_heads, cfg.d_ff,
                                               cfg.lstm_hidden, cfg.dropout, rng)
            self.fusion = build_fusion(cfg.fusion, cfg.d_model, cfg.d_att, rng)
        else:
            self.accent = None
            self.fusion = None
        self.ctc_head = Linear(cfg.d_model, cfg.vocab_size, rng)
        self.decoder = Decoder(cfg, rng)
        self._drop_rng = np.random.default_rng(seed + 1)

    @property
    def sos_eos(self) -> int:
        return 1

    @property
    def blank(self) -> int:
        return 0

    def validate_targets(self, targets) -> list[int]:
        out = []
        for t in targets:
            t = int(t)
            if t < 2 or t >= self.config.vocab_size:
                raise ConfigError(
                    f"target id {t} outside real-token range [2, {self.config.vocab_size})")
            out.append(t)
        return out

    def encode(self, feats, train: bool = False) -> Tensor:
        """features (T, feat_dim) -> fused encoder memory (T', d_model)."""
        x = feats if isinstance(feats, Tensor) else Tensor(feats)
        if x.shape[1] != self.config.feat_dim:
            raise ShapeError(f"expected feature dim {self.config.feat_dim}, got {x.shape[1]}")
        rng = self._drop_rng
        x = self.frontend.forward(x)
        x = x + positional_encoding(x.shape[0], self.config.d_model)
        if train:
            x = nm.dropout(x, self.config.dropout, rng)
        xg = self.general.forward(x, train=train, rng=rng)
        if self.accent is None:
            return xg
        xa = self.accent.forward(x, train=train, rng=rng)
        return self.fusion.forward(xg, xa)

    def forward_utterance(self, feats, targets=None, train: bool = False) -> ModelOutput:
        memory = self.encode(feats, train=train)
        ctc_logits = self.ctc_head.forward(memory)
        dec_logits = None
        if targets is not None:
            tgt = self.validate_targets(targets)
            dec_in = [self.sos_eos] + tgt
            dec_logits = self.decoder.forward(dec_in, memory, train=train, rng=self._drop_rng)
        return ModelOutput(fused=memory, ctc_logits=ctc_logits, dec_logits=dec_logits)

    def output_length(self, n_frames: int) -> int:
        return Conv2dSubsampling.output_length(n_frames)


# -- losses ------------------------------------------------------------------


def _log_softmax64(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def ctc_feasible(targets: list[int], n_frames: int) -> bool:
    repeats = sum(1 for a, b in zip(targets, targets[1:]) if a == b)
    return n_frames >= len(targets) + repeats


def ctc_loss(logits: Tensor, targets: list[int], blank: int = 0) -> Tensor:
    """Negative log probability of the target under the blank-augmented
    alignment lattice. Forward/backward recursions run in float64 log space;
    the gradient with respect to the logits is softmax(logits) - gamma where
    gamma is the per-frame label posterior.
    """
    T, V = logits.shape
    targets = [int(t) for t in targets]
    for t in targets:
        if not 0 <= t < V or t == blank:
            raise ConfigError(f"ctc target id {t} invalid for vocab {V} with blank {blank}")
    repeats = sum(1 for a, b in zip(targets, targets[1:]) if a == b)
    needed = len(targets) + repeats
    if T < needed:
        raise CtcInfeasibleError(
            f"target needs at least {needed} frames ({len(targets)} labels + {repeats} repeat gaps), got {T}")

    x64 = logits.data.astype(np.float64)
    lp = _log_softmax64(x64)  # (T, V)
    ext = [blank]
    for t in targets:
        ext.extend((t, blank))
    S = len(ext)
    ext = np.asarray(ext, dtype=np.int64)
    can_skip = np.zeros(S, dtype=bool)
    can_skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    neg = -np.inf
    alpha = np.full((T, S), neg)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        stay = prev
        step = np.full(S, neg)
        step[1:] = prev[:-1]
        skip = np.full(S, neg)
        skip[2:] = prev[:-2]
        skip[~can_skip] = neg
        alpha[t] = np.logaddexp(np.logaddexp(stay, step), skip) + lp[t, ext]

    logp = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    if not np.isfinite(logp):
        raise NumericError(f"ctc forward probability is not finite (logp={logp})")

    beta = np.full((T, S), neg)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + lp[t + 1, ext]
        stay = nxt
        step = np.full(S, neg)
        step[:-1] = nxt[1:]
        skip = np.full(S, neg)
        skip[:-2] = np.where(can_skip[2:], nxt[2:], neg)
        beta[t] = np.logaddexp(np.logaddexp(stay, step), skip)

    # per-frame state posteriors -> per-frame label posteriors
    log_gamma_s = alpha + beta - logp
    gamma = np.zeros((T, V))
    np.add.at(gamma.T, ext, np.exp(log_gamma_s).T)
    probs = np.exp(lp)

    def backward(g):
        nm._accum(logits, ((probs - gamma) * float(g)).astype(np.float32))

    return nm._make(np.asarray(-logp, dtype=np.float32), (logits,), backward)


def attention_loss(dec_logits: Tensor, targets: list[int], eos: int,
                   smoothing: float = 0.1) -> Tensor:
    """Label-smoothed cross entropy of the shifted target sequence
    (targets + eos), averaged over positions. The smoothed distribution puts
    1 - smoothing on the reference id and smoothing / vocab on every class.
    """
    n, v = dec_logits.shape
    ref = [int(t) for t in targets] + [int(eos)]
    if len(ref) != n:
        raise ShapeError(f"decoder emitted {n} positions but reference has {len(ref)}")
    q = np.full((n, v), smoothing / v, dtype=np.float32)
    q[np.arange(n), ref] += 1.0 - smoothing
    logp = nm.log_softmax(dec_logits)
    return -nm.sum_(logp * Tensor(q)) / float(n)


@dataclass
class BatchLoss:
    total: Tensor
    att_value: float
    ctc_value: float
    ctc_weight: float
    per_utterance: list = field(default_factory=list)


def hybrid_loss(att: Tensor, ctc: Tensor, ctc_weight: float,
                per_utterance=()) -> BatchLoss:
    """total = (1 - w) * attention + w * ctc, components kept for logging."""
    if not 0.0 <= ctc_weight <= 1.0:
        raise ConfigError(f"ctc_weight must lie in [0, 1], got {ctc_weight}")
    total = att * (1.0 - ctc_weight) + ctc * ctc_weight
    return BatchLoss(total=total, att_value=float(att.item()), ctc_value=float(ctc.item()),
                     ctc_weight=ctc_weight, per_utterance=list(per_utterance))


def utterance_loss(model: AformerModel, feats, targets, train: bool = False,
                   ctc_weight: float | None = None) -> BatchLoss:
    """Joint loss of one utterance."""
    cfg = model.config
    w = cfg.ctc_weight if ctc_weight is None else ctc_weight
    out = model.forward_utterance(feats, targets=targets, train=train)
    att = attention_loss(out.dec_logits, targets, model.sos_eos, smoothing=cfg.label_smoothing)
    ctc = ctc_loss(out.ctc_logits, model.validate_targets(targets), blank=model.blank)
    return hybrid_loss(att, ctc, w)


# -- decoding ----------------------------------------------------------------


class CtcPrefixScorer:
    """Incremental prefix scores of the frame-level CTC distribution.

    For a prefix g and candidate token c, ``extend`` returns
    log P(all complete labellings that start with g + c); ``final`` returns
    log P(labelling == g) for closing a hypothesis. State per hypothesis is
    the (T, 2) array of prefix-ending log probabilities (non-blank, blank).
    Float64 throughout.
    """

    def __init__(self, log_probs: np.ndarray, blank: int = 0):
        self.x = np.asarray(log_probs, dtype=np.float64)
        self.T, self.V = self.x.shape
        self.blank = blank

    def initial_state(self) -> np.ndarray:
        r = np.full((self.T, 2), -np.inf)
        r[0, 1] = self.x[0, self.blank]
        for t in range(1, self.T):
            r[t, 1] = r[t - 1, 1] + self.x[t, self.blank]
        return r

    def extend(self, prefix: tuple, cand_ids: np.ndarray, r_prev: np.ndarray):
        """Returns (psi (C,), r_new (T, 2, C)) for each candidate extension."""
        T, x = self.T, self.x
        cand_ids = np.asarray(cand_ids, dtype=np.int64)
        C = cand_ids.shape[0]
        xc = x[:, cand_ids]  # (T, C)
        r = np.full((T, 2, C), -np.inf)
        r_sum = np.logaddexp(r_prev[:, 0], r_prev[:, 1])  # (T,)
        log_phi = np.repeat(r_sum[:, None], C, axis=1)
        if prefix:
            same = cand_ids == prefix[-1]
            if same.any():
                log_phi[:, same] = r_prev[:, 1][:, None]
        olen = len(prefix)
        if olen == 0:
            r[0, 0, :] = xc[0]
            psi = xc[0].copy()
            start = 1
        else:
            psi = np.full(C, -np.inf)
            start = max(olen, 1)
        for t in range(start, T):
            r[t, 0] = np.logaddexp(r[t - 1, 0], log_phi[t - 1]) + xc[t]
            r[t, 1] = np.logaddexp(r[t - 1, 0], r[t - 1, 1]) + x[t, self.blank]
            psi = np.logaddexp(psi, log_phi[t - 1] + xc[t])
        return psi, r

    def final(self, r_prev: np.ndarray) -> float:
        return float(np.logaddexp(r_prev[self.T - 1, 0], r_prev[self.T - 1, 1]))


@dataclass
class DecodeResult:
    tokens: list[int]
    score: float
    n_frames: int


@dataclass
class _Hyp:
    tokens: tuple
    att: float
    state: np.ndarray
    joint: float


def decode_utterance(model: AformerModel, feats, beam: int = 4,
                     ctc_weight: float | None = None,
                     max_len: int | None = None) -> DecodeResult:
    """Beam search maximizing (1 - w) * attention + w * ctc-prefix score.

    No length normalization; hypotheses close on the end symbol, which scores
    the complete-labelling CTC probability. With a beam at least as large as
    the number of live prefixes this equals exhaustive search.
    """
    if beam < 1:
        raise ConfigError(f"beam must be >= 1, got {beam}")
    cfg = model.config
    w = cfg.ctc_weight if ctc_weight is None else ctc_weight
    if not 0.0 <= w <= 1.0:
        raise ConfigError(f"ctc_weight must lie in [0, 1], got {w}")
    with nm.no_grad():
        memory = model.encode(feats, train=False)
        ctc_lp = _log_softmax64(model.ctc_head.forward(memory).data.astype(np.float64))
    T = memory.shape[0]
    if max_len is None:
        max_len = max(2 * T, 4)
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    scorer = CtcPrefixScorer(ctc_lp, blank=model.blank)
    real_ids = np.arange(2, cfg.vocab_size, dtype=np.int64)
    eos = model.sos_eos

    live = [_Hyp(tokens=(), att=0.0, state=scorer.initial_state(), joint=0.0)]
    finished: list[tuple[tuple, float]] = []
    while live:
        cands: list[_Hyp] = []
        for hyp in live:
            with nm.no_grad():
                logits = model.decoder.forward([eos, *hyp.tokens], memory, train=False)
            att_lp = _log_softmax64(logits.data.astype(np.float64))[-1]
            att_close = hyp.att + att_lp[eos]
            if w == 0.0:
                # pure attention: never multiply a possibly -inf ctc term by zero
                close_score = att_close
            else:
                close_score = (1.0 - w) * att_close + w * scorer.final(hyp.state)
            finished.append((hyp.tokens, close_score))
            if len(hyp.tokens) >= max_len:
                continue
            psi, r_new = scorer.extend(hyp.tokens, real_ids, hyp.state)
            for i, c in enumerate(real_ids):
                att_score = hyp.att + att_lp[c]
                joint = att_score if w == 0.0 else (1.0 - w) * att_score + w * psi[i]
                if not np.isfinite(joint):
                    continue  # ctc-impossible extension (e.g. more labels than frames)
                cands.append(_Hyp(tokens=hyp.tokens + (int(c),), att=att_score,
                                  state=r_new[:, :, i], joint=joint))
        cands.sort(key=lambda h: h.joint, reverse=True)
        live = cands[:beam]
    best_tokens, best_score = max(finished, key=lambda pair: pair[1])
    return DecodeResult(tokens=list(best_tokens), score=float(best_score), n_frames=T)


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path, model: AformerModel, pass_id: str, global_step: int,
                    extra: dict | None = None):
    """Binary checkpoint: magic, version, JSON metadata block (config echo,
    pass id, step), then named float32 parameter tensors. Bitwise
    deterministic for identical inputs."""
    if pass_id not in PASS_IDS:
        raise ConfigError(f"unknown pass id {pass_id!r}, expected one of {PASS_IDS}")
    meta = {
        "config": model.config.to_dict(),
        "pass_id": pass_id,
        "global_step": int(global_step),
        "extra": extra or {},
    }
    params = list(model.named_parameters())
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta_raw)))
    buf.write(meta_raw)
    buf.write(struct.pack("<I", len(params)))
    for name, tensor in params:
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        shape = tensor.data.shape
        buf.write(struct.pack("<I", len(shape)))
        for extent in shape:
            buf.write(struct.pack("<I", extent))
        buf.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes(order="C"))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns (metadata, {name: float32 array}). Raises CheckpointError on
    magic/version mismatch or truncation (with byte offset)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes for {what} at byte offset {pos}, have {len(raw) - pos}")
        piece = raw[pos:pos + n]
        pos += n
        return piece

    magic = take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic: {magic!r} (expected {CHECKPOINT_MAGIC!r})")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", take(4, "metadata length"))
    meta = json.loads(take(meta_len, "metadata").decode("utf-8"))
    (count,) = struct.unpack("<I", take(4, "parameter count"))
    params: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<I", take(4, f"name length of parameter {i}"))
        name = take(name_len, f"name of parameter {i}").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"rank of {name}"))
        shape = tuple(struct.unpack("<I", take(4, f"extent of {name}"))[0] for _ in range(rank))
        n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(take(n_items * 4, f"data of {name}"), dtype="<f4").reshape(shape).copy()
        params[name] = data
    if pos != len(raw):
        raise CheckpointError(f"trailing bytes after {count} parameters at byte offset {pos}")
    return meta, params


def apply_parameters(model: AformerModel, params: dict[str, np.ndarray],
                     strict: bool = True):
    """Copy named arrays into the model's parameters (shape-checked)."""
    own = dict(model.named_parameters())
    missing = [n for n in own if n not in params]
    extra = [n for n in params if n not in own]
    if strict and (missing or extra):
        raise CheckpointError(f"parameter name mismatch: missing={missing[:4]} extra={extra[:4]}")
    for name, tensor in own.items():
        if name not in params:
            continue
        arr = params[name]
        if tuple(arr.shape) != tensor.data.shape:
            raise ShapeError(f"parameter {name}: checkpoint shape {arr.shape} vs model {tensor.data.shape}")
        tensor.data = np.ascontiguousarray(arr, dtype=np.float32)
    return model


def model_from_checkpoint(path, seed: int = 0) -> tuple[AformerModel, dict]:
    meta, params = load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["config"])
    model = AformerModel(cfg, seed=seed)
    apply_parameters(model, params)
    return model, meta
