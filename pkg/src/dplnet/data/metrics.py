"""Confusion-matrix based segmentation metrics."""

from __future__ import annotations

import numpy as np

from .manifest import IGNORE_INDEX


class UndefinedMetricError(ValueError):
    pass


class ConfusionMatrix:
    """M x M counts; rows are ground truth, columns predictions."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else counts

    def update(self, pred, label, ignore_index: int = IGNORE_INDEX) -> "ConfusionMatrix":
        confusion_update(self, pred, label, ignore_index)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def miou(self):
        return miou(self)

    def pixel_accuracy(self) -> float:
        return pixel_accuracy(self)


def confusion_update(cm: ConfusionMatrix, pred, label, ignore_index: int = IGNORE_INDEX) -> ConfusionMatrix:
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise ValueError(f"prediction {pred.shape} and label {label.shape} differ in shape")
    m = cm.num_classes
    valid = label != ignore_index
    p = pred[valid].astype(np.int64)
    g = label[valid].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= m):
        raise ValueError(f"predictions must lie in [0, {m})")
    if g.size and (g.min() < 0 or g.max() >= m):
        raise ValueError(f"labels must lie in [0, {m}) or equal {ignore_index}")
    cm.counts += np.bincount(g * m + p, minlength=m * m).reshape(m, m)
    return cm


def miou(cm: ConfusionMatrix) -> tuple[list[float], float]:
    """Per-class IoU (NaN where the class never occurs) and their mean."""
    c = cm.counts
    tp = np.diag(c).astype(np.float64)
    denom = c.sum(axis=0) + c.sum(axis=1) - np.diag(c)
    present = denom > 0
    if not present.any():
        raise UndefinedMetricError("IoU is undefined: no class has any pixels")
    iou = np.full(cm.num_classes, np.nan)
    iou[present] = tp[present] / denom[present]
    return iou.tolist(), float(iou[present].mean())


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.counts.sum()
    if total == 0:
        raise UndefinedMetricError("pixel accuracy is undefined for an empty confusion matrix")
    return float(np.trace(cm.counts) / total)


def class_accuracy(cm: ConfusionMatrix, classes) -> float:
    """Accuracy restricted to ground-truth pixels of ``classes``."""
    rows = cm.counts[list(classes)]
    total = rows.sum()
    if total == 0:
        raise UndefinedMetricError("no ground-truth pixels for the requested classes")
    return float(sum(cm.counts[c, c] for c in classes) / total)
