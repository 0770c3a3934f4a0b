"""Report rendering: delimited tables for machine reading and matplotlib
figures (error-rate bars, training-loss curves) written next to them."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

SYSTEM_LABELS = {
    "a1": "a1: clean pretrain",
    "a2": "a2: pooled pretrain",
    "b": "b: a1 + adaptation",
    "c": "c: full three-pass",
    "finetune": "finetune baseline",
}


def write_tsv(path, header: list[str], rows: list[list]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(str(c) for c in row) + "\n")


def write_jsonl(path, records: list[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def ablation_rows(report: dict) -> tuple[list[str], list[list]]:
    test_sets = report["test_sets"]
    header = ["system", "pass", *[f"{ts}_err" for ts in test_sets],
              *[f"{ts}_edits" for ts in test_sets], "final_loss", "train_seconds"]
    rows = []
    for name, sys in report["systems"].items():
        row = [name, sys["pass_id"]]
        row += [f"{sys['metrics'][ts]['error_rate']:.4f}" for ts in test_sets]
        row += [sys["metrics"][ts]["edits"] for ts in test_sets]
        row += [f"{sys['final_loss']:.4f}" if sys["final_loss"] is not None else "",
                f"{sys['train_seconds']:.1f}"]
        rows.append(row)
    return header, rows


def render_ablation_report(report: dict, out_dir) -> dict[str, str]:
    """Write the delimited table, a JSONL record stream, the error-rate bar
    chart, and the loss curves; returns {artifact: path}."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header, rows = ablation_rows(report)
    tsv = out_dir / "ablation.tsv"
    write_tsv(tsv, header, rows)

    records = []
    for name, sys in report["systems"].items():
        for ts, m in sys["metrics"].items():
            records.append({"event": "eval", "system": name, "test_set": ts, **m})
    for key, value in report["tracked"].items():
        records.append({"event": "tracked", "name": key, "value": value})
    jsonl = out_dir / "ablation-records.jsonl"
    write_jsonl(jsonl, records)

    bar_png = out_dir / "ablation-error-rates.png"
    plot_error_bars(report, bar_png)
    loss_png = out_dir / "training-loss.png"
    plot_loss_curves(report, loss_png)
    return {"table": str(tsv), "records": str(jsonl),
            "error_figure": str(bar_png), "loss_figure": str(loss_png)}


def plot_error_bars(report: dict, path):
    test_sets = report["test_sets"]
    names = list(report["systems"])
    width = 0.8 / len(test_sets)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for k, ts in enumerate(test_sets):
        xs = [i + k * width for i in range(len(names))]
        ys = [report["systems"][n]["metrics"][ts]["error_rate"] * 100 for n in names]
        ax.bar(xs, ys, width=width, label=ts)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(names))])
    ax.set_xticklabels([SYSTEM_LABELS.get(n, n) for n in names], rotation=20, ha="right")
    ax.set_ylabel("token error rate (%)")
    ax.set_title("Ablation: error rate by system and test set")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_loss_curves(report: dict, path):
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for name, sys in report["systems"].items():
        log_file = Path(sys["log_file"])
        if not log_file.exists():
            continue
        steps, losses = [], []
        for line in log_file.read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            steps.append(rec["step"])
            losses.append(rec["loss"])
        if steps:
            ax.plot(steps, losses, label=SYSTEM_LABELS.get(name, name))
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.set_title("Training loss per pass")
    if ax.get_legend_handles_labels()[0]:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
