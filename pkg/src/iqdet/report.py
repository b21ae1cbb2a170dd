"""Training-run report: per-run summary CSV plus loss / positive-IoU / mu-spread figures.

Each run directory holds a ``log.jsonl`` written by :func:`iqdet.toy.train.train`.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .formats import FormatError

LOSS_FIELDS = ("l_cls", "l_reg", "l_aux", "l_iq", "total")
SUMMARY_FIELDS = ("run", "steps", "final_total", "final_mean_pos_iou", "final_mu_std", "window")


def read_log(run_dir) -> list[dict]:
    path = Path(run_dir) / "log.jsonl"
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    try:
        records = [json.loads(line) for line in lines if line.strip()]
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if not records:
        raise FormatError(f"{path} has no steps")
    return records


def smooth(values, window: int) -> np.ndarray:
    """Trailing moving average; the first ``window - 1`` points average what exists so far."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.concatenate([[0.0], v]))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def summarize(name: str, records: list[dict], window: int = 100) -> dict:
    tail = records[-window:]
    return {
        "run": name,
        "steps": len(records),
        "final_total": float(np.mean([r["total"] for r in tail])),
        "final_mean_pos_iou": float(np.mean([r["mean_pos_iou"] for r in tail])),
        "final_mu_std": float(np.mean([r["mu_std"] for r in tail])),
        "window": len(tail),
    }


def write_summary(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def _figure(runs, key_fn, title, ylabel, path, window):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for name, records in runs:
        for label, values in key_fn(name, records):
            steps = [r["step"] for r in records]
            ax.plot(steps, smooth(values, window), label=label, linewidth=1.2)
    ax.set_title(title)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    # no Software/date metadata so reruns give identical bytes
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def render(run_dirs, out_dir, window: int = 50) -> dict:
    """Write ``summary.csv``, ``loss.png``, ``pos_iou.png`` and ``mu_std.png`` into ``out_dir``.

    Returns the paths written keyed by kind.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = []
    for d in run_dirs:
        d = Path(d)
        runs.append((d.name or str(d), read_log(d)))
    paths = {"summary": out / "summary.csv", "loss": out / "loss.png", "pos_iou": out / "pos_iou.png",
             "mu_std": out / "mu_std.png"}
    write_summary(paths["summary"], [summarize(n, r) for n, r in runs])
    multi = len(runs) > 1

    def losses(name, records):
        keys = ("total",) if multi else LOSS_FIELDS
        return [(f"{name}:{k}" if multi else k, [r[k] for r in records]) for k in keys]

    _figure(runs, losses, "training loss", "loss (moving average)", paths["loss"], window)
    _figure(runs, lambda n, r: [(n, [x["mean_pos_iou"] for x in r])], "mean IoU of positives",
            "IoU (moving average)", paths["pos_iou"], window)
    _figure(runs, lambda n, r: [(n, [x["mu_std"] for x in r])], "spread of learned mu across instances",
            "std (moving average)", paths["mu_std"], window)
    return paths
