"""Window-level F1 and point-level IoU."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ConfusionCounts:
    """One-vs-rest counts per class. Adding two instances merges them."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @classmethod
    def from_labels(cls, pred, truth, k: int) -> "ConfusionCounts":
        pred, truth = _pair(pred, truth)
        tp, fp, fn, tn = (np.zeros(k, dtype=np.int64) for _ in range(4))
        m = len(pred)
        for c in range(k):
            p, t = pred == c, truth == c
            tp[c] = np.count_nonzero(p & t)
            fp[c] = np.count_nonzero(p & ~t)
            fn[c] = np.count_nonzero(~p & t)
            tn[c] = m - tp[c] - fp[c] - fn[c]
        return cls(tp, fp, fn, tn)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    def iou(self) -> np.ndarray:
        den = self.tp + self.fp + self.fn
        return np.divide(self.tp, den, out=np.zeros(len(den)), where=den > 0)

    def present(self) -> np.ndarray:
        return (self.tp + self.fp + self.fn) > 0


def _pair(pred, truth):
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if len(pred) != len(truth):
        raise ValueError(f"prediction length {len(pred)} != truth length {len(truth)}")
    return pred, truth


@dataclass(frozen=True)
class F1Result:
    f1: float
    tp: int
    fp: int
    fn: int
    degenerate: bool = False

    def __float__(self):
        return self.f1


def f1_score(pred, truth) -> F1Result:
    """Binary F1, ``2TP / (2TP + FP + FN)``.

    With no positives in either input the score is 0 and ``degenerate`` is set.
    """
    pred, truth = _pair(pred, truth)
    if len(pred) == 0:
        raise ValueError("f1_score needs at least one sample")
    p, t = pred.astype(bool), truth.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    den = 2 * tp + fp + fn
    if den == 0:
        return F1Result(0.0, 0, 0, 0, degenerate=True)
    return F1Result(2 * tp / den, tp, fp, fn)


@dataclass(frozen=True)
class IoUResult:
    per_class: np.ndarray
    miou: float
    included: np.ndarray
    counts: ConfusionCounts = field(repr=False)


def iou_per_class(pred, truth, k: int) -> IoUResult:
    """Per-class IoU; mIoU averages the classes seen in pred or truth."""
    counts = ConfusionCounts.from_labels(pred, truth, k)
    return iou_from_counts(counts)


def iou_from_counts(counts: ConfusionCounts) -> IoUResult:
    iou = counts.iou()
    present = counts.present()
    miou = float(iou[present].mean()) if present.any() else 0.0
    return IoUResult(iou, miou, present, counts)


@dataclass
class MetricsReport:
    class_names: list[str]
    counts: ConfusionCounts
    f1: float
    miou: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(["class", "tp", "fp", "fn", "tn", "iou"])
        iou = self.counts.iou()
        for c, name in enumerate(self.class_names):
            out.writerow([name, int(self.counts.tp[c]), int(self.counts.fp[c]),
                          int(self.counts.fn[c]), int(self.counts.tn[c]), f"{iou[c]:.6f}"])
        out.writerow([])
        out.writerow(["f1", "miou"])
        out.writerow([f"{self.f1:.6f}", f"{self.miou:.6f}"])
        return buf.getvalue()

    def table(self) -> str:
        iou = self.counts.iou()
        lines = [f"{'class':<12}{'tp':>10}{'fp':>10}{'fn':>10}{'tn':>10}{'iou':>8}"]
        for c, name in enumerate(self.class_names):
            lines.append(f"{name:<12}{self.counts.tp[c]:>10}{self.counts.fp[c]:>10}"
                         f"{self.counts.fn[c]:>10}{self.counts.tn[c]:>10}{iou[c]:>8.3f}")
        lines.append(f"f1={self.f1:.4f}  miou={self.miou:.4f}")
        return "\n".join(lines)
