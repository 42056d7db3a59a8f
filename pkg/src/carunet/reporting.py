"""Report writers: delimited text next to rendered figures.

Every reporting path emits a machine-readable file (TSV or key=value) and,
unless figures are disabled, a matplotlib PNG rendered from the same data:
training runs get loss/AUC curves, evaluations get an ROC curve.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .metrics import MetricsReport
from .training import EpochStats


def write_history_tsv(path, history: list[EpochStats]) -> None:
    lines = ["epoch\ttrain_loss\tval_loss\tval_auc"]
    for h in history:
        lines.append(f"{h.epoch}\t{h.train_loss!r}\t{h.val_loss!r}\t{h.val_auc!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def render_training_curves(path, history: list[EpochStats]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [h.epoch for h in history]
    fig, (ax_loss, ax_auc) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, [h.train_loss for h in history], label="train")
    ax_loss.plot(epochs, [h.val_loss for h in history], label="validation")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("BCE loss")
    ax_loss.legend()
    ax_auc.plot(epochs, [h.val_auc for h in history], color="tab:green")
    ax_auc.set_xlabel("epoch")
    ax_auc.set_ylabel("validation AUC")
    ax_auc.set_ylim(0.0, 1.0)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def format_metrics_table(report: MetricsReport) -> str:
    width = max(6, *(len(p.id) for p in report.per_image)) + 2 if report.per_image else 8
    head = f"{'':{width}s}{'Spe':>8s}{'Sen':>8s}{'Acc':>8s}{'AUC':>8s}"
    rows = [head, f"{'pooled':{width}s}{report.spe:8.4f}{report.sen:8.4f}{report.acc:8.4f}{report.auc:8.4f}"]
    for p in report.per_image:
        auc_s = f"{p.auc:8.4f}" if p.auc is not None else f"{'n/a':>8s}"
        rows.append(f"{p.id:{width}s}{p.spe:8.4f}{p.sen:8.4f}{p.acc:8.4f}{auc_s}")
    return "\n".join(rows)


def write_metrics_files(out_dir, report: MetricsReport) -> None:
    out_dir = Path(out_dir)
    kv = [f"{key} = {value!r}" if isinstance(value, float) else f"{key} = {value}" for key, value in report.as_dict().items()]
    (out_dir / "metrics.txt").write_text("\n".join(kv) + "\n")
    rows = ["id\tspe\tsen\tacc\tauc\ttp\tfp\ttn\tfn"]
    for p in report.per_image:
        auc_s = repr(p.auc) if p.auc is not None else "nan"
        c = p.counts
        rows.append(f"{p.id}\t{p.spe!r}\t{p.sen!r}\t{p.acc!r}\t{auc_s}\t{c.tp}\t{c.fp}\t{c.tn}\t{c.fn}")
    (out_dir / "metrics_per_image.tsv").write_text("\n".join(rows) + "\n")


def roc_points(scores: np.ndarray, labels: np.ndarray, max_points: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """ROC polyline (fpr, tpr), downsampled for plotting."""
    order = np.argsort(-scores, kind="stable")
    y = labels[order].astype(np.float64)
    tp = np.cumsum(y)
    fp = np.cumsum(1.0 - y)
    tpr = np.concatenate([[0.0], tp / tp[-1]])
    fpr = np.concatenate([[0.0], fp / fp[-1]])
    if fpr.size > max_points:
        idx = np.linspace(0, fpr.size - 1, max_points).astype(int)
        fpr, tpr = fpr[idx], tpr[idx]
    return fpr, tpr


def render_roc(path, scores: np.ndarray, labels: np.ndarray, auc_value: float) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fpr, tpr = roc_points(scores, labels)
    fig, ax = plt.subplots(figsize=(4.2, 4.0))
    ax.plot(fpr, tpr, color="tab:blue")
    ax.plot([0, 1], [0, 1], linestyle=":", color="gray")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(f"AUC = {auc_value:.4f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
