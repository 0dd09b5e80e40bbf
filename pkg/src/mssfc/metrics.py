"""Confusion accumulation and P/R/IoU/F1 computation.

Counts are plain Python ints (unbounded), so they survive any dataset
scale; merging shard counts is exact and order-independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def accumulate(counts: ConfusionCounts, pred, label, threshold: float = 0.5) -> ConfusionCounts:
    """Binarize pred at >= threshold and add pixel counts; foreground is 1."""
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise ShapeError(f"accumulate: shapes differ: {pred.shape} vs {label.shape}")
    if not np.isin(label, (0, 1)).all():
        raise ValueError("accumulate: labels must be binary {0,1}")
    hard = pred >= threshold
    pos = label == 1
    return ConfusionCounts(
        counts.tp + int(np.count_nonzero(hard & pos)),
        counts.fp + int(np.count_nonzero(hard & ~pos)),
        counts.fn + int(np.count_nonzero(~hard & pos)),
        counts.tn + int(np.count_nonzero(~hard & ~pos)),
    )


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def metrics_from(c: ConfusionCounts):
    """(precision, recall, iou, f1); 0/0 cases are defined as 0."""
    p = _ratio(c.tp, c.tp + c.fp)
    r = _ratio(c.tp, c.tp + c.fn)
    iou = _ratio(c.tp, c.tp + c.fp + c.fn)
    f1 = 2 * p * r / (p + r) if (p + r) else 0.0
    return p, r, iou, f1
