"""Confusion-count metrics for binarized change masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import ChangeMask

__all__ = ["MetricsReport", "evaluate"]


@dataclass(frozen=True)
class MetricsReport:
    """F1, IoU and overall accuracy plus the raw confusion counts.

    IoU and F1 are algebraically locked: iou == f1 / (2 - f1). A pair
    of empty masks (no ground truth, no prediction) scores 1.0 on both
    by convention.
    """

    f1: float
    iou: float
    overall_accuracy: float
    true_positives: int
    false_positives: int
    false_negatives: int
    true_negatives: int

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int) -> "MetricsReport":
        if min(tp, fp, fn, tn) < 0:
            raise ValueError("confusion counts must be nonnegative")
        total = tp + fp + fn + tn
        if total == 0:
            raise ValueError("confusion counts are all zero")
        denom_f1 = 2 * tp + fp + fn
        f1 = 1.0 if denom_f1 == 0 else 2.0 * tp / denom_f1
        denom_iou = tp + fp + fn
        iou = 1.0 if denom_iou == 0 else tp / denom_iou
        oa = (tp + tn) / total
        return cls(
            f1=float(f1),
            iou=float(iou),
            overall_accuracy=float(oa),
            true_positives=int(tp),
            false_positives=int(fp),
            false_negatives=int(fn),
            true_negatives=int(tn),
        )

    def to_dict(self) -> dict:
        return {
            "f1": self.f1,
            "iou": self.iou,
            "overall_accuracy": self.overall_accuracy,
            "true_positives": self.true_positives,
            "false_positives": self.false_positives,
            "false_negatives": self.false_negatives,
            "true_negatives": self.true_negatives,
        }


def evaluate(pred: ChangeMask, gt: ChangeMask) -> MetricsReport:
    """Binarize both masks at their own thresholds and score them."""
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes disagree: {pred.shape} vs {gt.shape}")
    p = pred.binarize()
    g = gt.binarize()
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return MetricsReport.from_counts(tp, fp, fn, tn)
