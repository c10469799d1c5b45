"""Weighted cross-entropy, Lovasz-softmax and confusion-matrix mIoU."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .kitti_io import IGNORE_ID


class UndefinedMetricError(ValueError):
    pass


class LabelDataError(ValueError):
    pass


@dataclass(frozen=True)
class ClassTable:
    num_classes: int
    weights: np.ndarray | None = None
    ignore_id: int = IGNORE_ID
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        w = np.ones(self.num_classes) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        if w.shape != (self.num_classes,) or not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("class weights must be finite, positive, one per class")
        object.__setattr__(self, "weights", w)
        if self.names is not None and len(self.names) != self.num_classes:
            raise ValueError("one name per class required")

    def class_names(self) -> list[str]:
        return list(self.names) if self.names else [f"class_{c}" for c in range(self.num_classes)]


def inverse_log_frequency(counts: np.ndarray, eps: float = 1.02) -> np.ndarray:
    """Class weights ``1 / ln(eps + freq)``; unseen classes get the largest weight."""
    counts = np.asarray(counts, dtype=np.float64)
    freq = counts / max(counts.sum(), 1.0)
    return 1.0 / np.log(eps + freq)


def _valid_targets(targets: np.ndarray, table: ClassTable) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    valid = targets != table.ignore_id
    bad = valid & ((targets < 0) | (targets >= table.num_classes))
    if np.any(bad):
        raise LabelDataError(f"class ids outside [0, {table.num_classes}) and not ignore")
    return valid


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def weighted_cross_entropy(logits: np.ndarray, targets: np.ndarray, table: ClassTable):
    """Mean over non-ignored rows of ``w[y] * -log softmax(logits)[y]``.

    Returns ``(loss, dloss/dlogits)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    valid = _valid_targets(targets, table)
    grad = np.zeros_like(logits)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, grad
    y = targets[valid]
    logp = log_softmax(logits[valid])
    w = table.weights[y]
    rows = np.arange(len(y))
    loss = float(np.sum(w * -logp[rows, y]) / n_valid)
    g = np.exp(logp)
    g[rows, y] -= 1.0
    grad[valid] = g * (w / n_valid)[:, None]
    return loss, grad


def lovasz_grad(fg_sorted: np.ndarray) -> np.ndarray:
    """Jaccard-loss increments along a descending error ordering."""
    fg_sorted = np.asarray(fg_sorted, dtype=np.float64)
    gts = fg_sorted.sum()
    intersection = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jaccard = 1.0 - intersection / union
    if len(fg_sorted) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs: np.ndarray, targets: np.ndarray, table: ClassTable):
    """Lovasz-softmax averaged over the classes present in ``targets``.

    Returns ``(loss, dloss/dprobs)``. The loss is piecewise linear in the
    probabilities; the gradient is that of the active piece, with sort ties
    resolved by original row order.
    """
    probs = np.asarray(probs, dtype=np.float64)
    valid = _valid_targets(targets, table)
    grad = np.zeros_like(probs)
    if not valid.any():
        return 0.0, grad
    p = probs[valid]
    y = np.asarray(targets, dtype=np.int64)[valid]
    present = [c for c in range(table.num_classes) if np.any(y == c)]
    rows = np.arange(len(y))
    g = np.zeros_like(p)
    total = 0.0
    for c in present:
        fg = (y == c).astype(np.float64)
        errors = np.abs(fg - p[:, c])
        order = np.lexsort((rows, -errors))
        lg = lovasz_grad(fg[order])
        total += float(errors[order] @ lg)
        # d|fg - p| / dp = -1 on foreground rows, +1 elsewhere
        g[order, c] += lg * np.where(fg[order] > 0, -1.0, 1.0)
    grad[valid] = g / len(present)
    return total / len(present), grad


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows ground truth, cols prediction

    @classmethod
    def zeros(cls, num_classes: int) -> ConfusionMatrix:
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate_confusion(pred: np.ndarray, truth: np.ndarray, table: ClassTable,
                         acc: ConfusionMatrix | None = None) -> ConfusionMatrix:
    """Return ``acc`` plus the counts of ``(truth, pred)`` pairs; ignore truth is skipped."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise LabelDataError("prediction and truth lengths differ")
    c = table.num_classes
    keep = _valid_targets(truth, table)
    p = pred[keep]
    if np.any((p < 0) | (p >= c)):
        raise LabelDataError(f"predicted ids outside [0, {c})")
    counts = np.bincount(truth[keep] * c + p, minlength=c * c).reshape(c, c)
    base = acc.counts if acc is not None else 0
    return ConfusionMatrix(base + counts)


def miou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where undefined) and the mean over defined classes."""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = tp + fp + fn
    defined = denom > 0
    if not defined.any():
        raise UndefinedMetricError("no class has a non-zero IoU denominator")
    iou = np.full(len(tp), np.nan)
    iou[defined] = tp[defined] / denom[defined]
    return iou, float(iou[defined].mean())


def write_metrics_csv(path: str | os.PathLike, per_class: np.ndarray, mean: float, names: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "iou"])
        for name, value in zip(names, per_class):
            writer.writerow([name, "" if np.isnan(value) else repr(float(value))])
        writer.writerow(["mean", repr(float(mean))])
