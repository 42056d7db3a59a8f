"""Segmentation metrics: specificity, sensitivity, accuracy, and exact AUC.

AUC is the Mann-Whitney statistic: the fraction of (vessel, background)
pixel pairs where the vessel pixel scores higher, ties counting one half.
Computed by sorting with midranks it is mathematically identical to the
trapezoidal area under the ROC curve, and, because every rank is a multiple
of 0.5 (exactly representable), it matches an exhaustive pair count bit for
bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FundusSample, crop_to_original
from .errors import CarUnetError, DataError, ShapeError
from .tensor import Tensor


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def spe(self) -> float:
        return self.tn / (self.tn + self.fp)

    def sen(self) -> float:
        return self.tp / (self.tp + self.fn)

    def acc(self) -> float:
        return (self.tp + self.tn) / self.total


@dataclass
class PerImageMetrics:
    id: str
    spe: float
    sen: float
    acc: float
    auc: float | None  # None when the image has only one class
    counts: ConfusionCounts


@dataclass
class MetricsReport:
    spe: float
    sen: float
    acc: float
    auc: float
    counts: ConfusionCounts
    per_image: list[PerImageMetrics]

    def as_dict(self) -> dict[str, float | int]:
        c = self.counts
        return {"spe": self.spe, "sen": self.sen, "acc": self.acc, "auc": self.auc, "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn}


def _require_binary(name: str, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if not np.isin(arr, (0, 1)).all():
        raise DataError(f"{name} must be binary (values in {{0, 1}})")
    return arr.astype(bool)


def confusion(pred_binary: np.ndarray, mask: np.ndarray) -> ConfusionCounts:
    pred = _require_binary("prediction", pred_binary)
    truth = _require_binary("mask", mask)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match mask shape {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    tn = int(np.count_nonzero(~pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def auc(scores, labels) -> float:
    """Exact Mann-Whitney AUC via midranks, O(n log n)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _require_binary("labels", np.asarray(labels).ravel())
    if s.shape != y.shape:
        raise ShapeError(f"scores shape {s.shape} does not match labels shape {y.shape}")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC is undefined when only one class is present")
    order = np.argsort(s, kind="stable")
    sorted_s = s[order]
    ranks = np.empty(s.size, dtype=np.float64)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # midrank, a multiple of 0.5
        i = j + 1
    rank_sum_pos = float(ranks[y].sum())
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def dice(pred_binary: np.ndarray, mask: np.ndarray) -> float:
    pred = _require_binary("prediction", pred_binary)
    truth = _require_binary("mask", mask)
    denom = int(np.count_nonzero(pred)) + int(np.count_nonzero(truth))
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(pred & truth)) / denom


def evaluate_model(net, samples: list[FundusSample], threshold: float = 0.5) -> MetricsReport:
    """Score a network over samples, cropping every prediction back first.

    Dataset-level numbers pool pixels across all images; per-image numbers
    are reported alongside. Binarization is prob > threshold, so a score
    exactly at the threshold counts as background.
    """
    if hasattr(net, "set_mode"):
        net.set_mode("eval")
    pooled_scores: list[np.ndarray] = []
    pooled_truth: list[np.ndarray] = []
    per_image: list[PerImageMetrics] = []
    total = ConfusionCounts(0, 0, 0, 0)
    for sample in samples:
        try:
            prob = predict_probabilities(net, sample)
        except CarUnetError as exc:
            raise type(exc)(f"sample '{sample.id}': {exc}") from exc
        truth = crop_to_original(sample.mask, sample.pad_offsets, sample.original_size)[0]
        scores = prob.ravel()
        labels = truth.ravel().astype(np.uint8)
        pooled_scores.append(scores)
        pooled_truth.append(labels)
        counts = confusion((prob > threshold).astype(np.uint8), truth.astype(np.uint8))
        total = ConfusionCounts(total.tp + counts.tp, total.fp + counts.fp, total.tn + counts.tn, total.fn + counts.fn)
        has_both = 0 < labels.sum() < labels.size
        per_image.append(
            PerImageMetrics(
                id=sample.id,
                spe=counts.spe() if counts.tn + counts.fp else float("nan"),
                sen=counts.sen() if counts.tp + counts.fn else float("nan"),
                acc=counts.acc(),
                auc=auc(scores, labels) if has_both else None,
                counts=counts,
            )
        )
    all_scores = np.concatenate(pooled_scores)
    all_truth = np.concatenate(pooled_truth)
    return MetricsReport(
        spe=total.spe(),
        sen=total.sen(),
        acc=total.acc(),
        auc=auc(all_scores, all_truth),
        counts=total,
        per_image=per_image,
    )


def predict_probabilities(net, sample: FundusSample) -> np.ndarray:
    """Forward one padded sample and crop the probability map back. Returns (H0, W0)."""
    out = net.forward(Tensor(sample.image[None]))
    prob = out.data[0]
    return crop_to_original(prob, sample.pad_offsets, sample.original_size)[0]
