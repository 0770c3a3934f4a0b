"""Command-line entry point.

Subcommands: gen-data, pretrain, adapt, retrain, finetune, decode, score,
ablate. Configuration comes from a YAML file (validated against a fixed
schema) plus repeatable ``--override section.key=value`` flags; every command
is deterministic given (seed, config).

Exit codes: 0 success, 2 usage error, 3 invalid configuration,
4 missing file, 5 malformed data/checkpoint file.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dc_fields
from pathlib import Path

import yaml

from .data import (DataError, DataFormatError, Tokenizer, DEFAULT_CHARS,
                   cmvn, load_corpus_list, read_manifest)
from .model import (CheckpointError, ConfigError, ModelConfig,
                    decode_utterance, model_from_checkpoint, GENERAL_PREFIX)
from .scoring import ScoreError, score_pairs, to_symbols
from .training import (AblationSettings, PassSpec, TrainError,
                       build_task_corpora, run_ablation, run_pass)
from . import report as report_mod

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_FORMAT = 5

_MODEL_KEYS = {f.name for f in dc_fields(ModelConfig)} - {"vocab_size", "feat_dim"}
_ABLATION_KEYS = {f.name for f in dc_fields(AblationSettings)}
_SCHEMA = {
    "model": _MODEL_KEYS,
    "data": {"chars", "feat_dim", "noise_level", "proto_seed"},
    "training": {"steps", "batch_size", "warmup", "base_lr"},
    "ablation": _ABLATION_KEYS,
    "decode": {"beam", "max_len"},
}

DEFAULT_CONFIG = {
    "model": {},
    "data": {"chars": DEFAULT_CHARS, "feat_dim": 16, "noise_level": 0.3, "proto_seed": 0},
    "training": {"steps": 300, "batch_size": 16, "warmup": 120, "base_lr": 0.5},
    "ablation": {},
    "decode": {"beam": 4, "max_len": None},
}


def validate_config(cfg: dict) -> dict:
    if not isinstance(cfg, dict):
        raise ConfigError(f"config root must be a mapping, got {type(cfg).__name__}")
    merged = {k: dict(v) for k, v in DEFAULT_CONFIG.items()}
    for section, values in cfg.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section {section!r}, expected one of {sorted(_SCHEMA)}")
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be a mapping")
        for key in values:
            if key not in _SCHEMA[section]:
                raise ConfigError(
                    f"unknown key {section}.{key}; allowed: {sorted(_SCHEMA[section])}")
        merged[section].update(values)
    return merged


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            cfg = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"config file is not valid YAML: {e}") from e
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        parts = dotted.split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key must be section.key, got {dotted!r}")
        section, key = parts
        cfg.setdefault(section, {})
        if not isinstance(cfg[section], dict):
            raise ConfigError(f"cannot override inside non-mapping section {section!r}")
        cfg[section][key] = yaml.safe_load(raw)
    return validate_config(cfg)


def build_model_config(cfg: dict) -> tuple[ModelConfig, Tokenizer]:
    tokenizer = Tokenizer(cfg["data"]["chars"])
    model_cfg = ModelConfig(vocab_size=tokenizer.vocab_size,
                            feat_dim=int(cfg["data"]["feat_dim"]),
                            **cfg["model"])
    return model_cfg, tokenizer


def build_ablation_settings(cfg: dict, seed: int) -> AblationSettings:
    values = dict(cfg["ablation"])
    values.setdefault("seed", seed)
    values.setdefault("feat_dim", int(cfg["data"]["feat_dim"]))
    values.setdefault("noise_level", float(cfg["data"]["noise_level"]))
    return AblationSettings(**values)


def load_corpora(paths: list[str]) -> dict[str, list]:
    corpora = {}
    for path in paths:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"corpus file not found: {p}")
        tag = read_manifest(p).tag
        corpora[tag] = load_corpus_list(p)
    return corpora


def _add_common(sp, config=True, out=False, out_required=False, ckpt=False,
                beam=False, ctc=False):
    sp.add_argument("--seed", type=int, default=0, help="run seed (default 0)")
    sp.add_argument("--override", action="append", default=[], metavar="K=V",
                    help="config override, section.key=value (repeatable)")
    if config:
        sp.add_argument("--config", default=None, metavar="PATH", help="YAML config file")
    if out:
        sp.add_argument("--out", required=out_required, default=None, metavar="DIR",
                        help="output directory")
    if ckpt:
        sp.add_argument("--ckpt", required=True, metavar="PATH", help="input checkpoint")
    if beam:
        sp.add_argument("--beam", type=int, default=None, help="beam size (default from config: 4)")
    if ctc:
        sp.add_argument("--ctc-weight", type=float, default=None, dest="ctc_weight",
                        help="joint-loss/decoding weight on the frame-level branch "
                             "(default: the configured value, 0.3)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aformer",
        description="Dual-encoder accent-robust speech-to-text at desk scale: "
                    "synthetic data, multi-pass training, decoding, scoring, ablation.")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-data", help="generate the synthetic task corpora")
    _add_common(sp, out=True, out_required=True)
    sp.set_defaults(func=cmd_gen_data)

    for name, help_text in (("pretrain", "train from scratch (one corpus: clean pretrain; several: pooled pretrain)"),
                            ("adapt", "freeze the general encoder and adapt on accented data"),
                            ("retrain", "pooled re-train from an adaptation checkpoint"),
                            ("finetune", "full-model finetune from a pretrain checkpoint")):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("corpora", nargs="+", metavar="CORPUS", help="corpus file(s)")
        _add_common(sp, out=True, out_required=True, ckpt=(name != "pretrain"), ctc=True)
        sp.set_defaults(func=cmd_train, pass_name=name)

    sp = sub.add_parser("decode", help="beam-decode a corpus with a trained checkpoint")
    sp.add_argument("corpus", metavar="CORPUS", help="corpus file to decode")
    _add_common(sp, out=True, out_required=True, ckpt=True, beam=True, ctc=True)
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("score", help="token error rate between reference and hypothesis files")
    sp.add_argument("ref", metavar="REF", help="reference file, one space-separated token line per utterance")
    sp.add_argument("hyp", metavar="HYP", help="hypothesis file, same layout")
    sp.add_argument("--name", default="test", help="test-set label in the report")
    _add_common(sp, config=False, out=True)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("ablate", help="run the five-system comparison and render the report")
    _add_common(sp, out=True, out_required=True, beam=True, ctc=True)
    sp.set_defaults(func=cmd_ablate)
    return parser


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.override)
    settings = build_ablation_settings(cfg, args.seed)
    tokenizer = Tokenizer(cfg["data"]["chars"])
    corpora = build_task_corpora(args.out, settings, tokenizer)
    for tag, records in corpora.items():
        frames = sum(r.features.shape[0] for r in records)
        print(f"{tag}\t{len(records)} utterances\t{frames} frames")
    return EXIT_OK


_PASS_FOR_COMMAND = {"adapt": "A2", "retrain": "A3", "finetune": "finetune"}


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.override)
    corpora = load_corpora(args.corpora)
    tags = list(corpora)
    tr = cfg["training"]
    if args.pass_name == "pretrain":
        pass_id = "A1" if len(tags) == 1 else "pooled-pretrain"
        model_cfg, _ = build_model_config(cfg)
        init_from, freeze = None, ()
    else:
        pass_id = _PASS_FOR_COMMAND[args.pass_name]
        model_cfg = None
        freeze = (GENERAL_PREFIX,) if pass_id == "A2" else ()
        init_from = args.ckpt
    spec = PassSpec(pass_id, tags, steps=int(tr["steps"]), batch_size=int(tr["batch_size"]),
                    warmup=int(tr["warmup"]), base_lr=float(tr["base_lr"]),
                    init_from=init_from, freeze_prefixes=tuple(freeze),
                    seed=args.seed, ctc_weight=args.ctc_weight)
    tokenizer = Tokenizer(cfg["data"]["chars"])
    _, manifest = run_pass(spec, corpora, args.out, config=model_cfg, tokenizer=tokenizer)
    print(f"pass {manifest.pass_id}: {manifest.steps} steps, "
          f"loss {manifest.first_loss if manifest.first_loss is not None else float('nan'):.4f}"
          f" -> {manifest.final_loss if manifest.final_loss is not None else float('nan'):.4f}, "
          f"checkpoint {manifest.checkpoint}")
    return EXIT_OK


def cmd_decode(args) -> int:
    cfg = load_config(args.config, args.override)
    model, meta = model_from_checkpoint(args.ckpt, seed=args.seed)
    tokenizer = Tokenizer(cfg["data"]["chars"])
    if tokenizer.vocab_size != model.config.vocab_size:
        raise ConfigError(f"checkpoint vocab {model.config.vocab_size} != config vocab {tokenizer.vocab_size}")
    corpora = load_corpora([args.corpus])
    (tag, records), = corpora.items()
    beam = args.beam if args.beam is not None else int(cfg["decode"]["beam"])
    max_len = cfg["decode"]["max_len"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    with open(out / "hyp.txt", "w") as hyp_f, open(out / "ref.txt", "w") as ref_f:
        for rec in records:
            result = decode_utterance(model, cmvn(rec.features), beam=beam,
                                      ctc_weight=args.ctc_weight,
                                      max_len=int(max_len) if max_len else None)
            hyp_text = tokenizer.detokenize(result.tokens) if result.tokens else ""
            hyp_f.write(" ".join(to_symbols(hyp_text)) + "\n")
            ref_f.write(" ".join(to_symbols(rec.tokens)) + "\n")
            rows.append({"event": "decode", "id": rec.id, "corpus": tag,
                         "hyp": hyp_text, "ref": rec.tokens, "score": result.score,
                         "frames": result.n_frames})
    report_mod.write_jsonl(out / "decode-records.jsonl", rows)
    print(f"decoded {len(records)} utterances from {tag} "
          f"(pass {meta['pass_id']}) -> {out / 'hyp.txt'}")
    return EXIT_OK


def _read_token_lines(path) -> list[list[str]]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"token file not found: {p}")
    return [line.split() for line in p.read_text().splitlines()]


def cmd_score(args) -> int:
    refs = _read_token_lines(args.ref)
    hyps = _read_token_lines(args.hyp)
    report = score_pairs(refs, hyps, name=args.name)
    header = ["name", "n_utts", "ref_tokens", "sub", "ins", "del", "edits", "error_rate"]
    row = [report.name, report.n_utts, report.ref_tokens, report.substitutions,
           report.insertions, report.deletions, report.edits, f"{report.error_rate:.4f}"]
    print("\t".join(header))
    print("\t".join(str(c) for c in row))
    print(f"{report.name}: token error rate {report.error_rate * 100:.1f}%")
    if args.out:
        report_mod.write_tsv(Path(args.out) / "score.tsv", header, [row])
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.override)
    settings = build_ablation_settings(cfg, args.seed)
    if args.beam is not None:
        settings.beam = args.beam
    if args.ctc_weight is not None:
        settings.decode_ctc_weight = args.ctc_weight
    model_cfg, _ = build_model_config(cfg)
    report = run_ablation(args.out, settings, config=model_cfg)
    artifacts = report_mod.render_ablation_report(report, args.out)
    header, rows = report_mod.ablation_rows(report)
    print("\t".join(header))
    for row in rows:
        print("\t".join(str(c) for c in row))
    for key, value in report["tracked"].items():
        print(f"tracked\t{key}\t{value:.4f}")
    print(json.dumps(artifacts, indent=2))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TrainError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (DataFormatError, DataError, CheckpointError, ScoreError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
