"""Recall and F1 for the misinformation class (label 1)."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np


class UndefinedMetricError(ZeroDivisionError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    P: int    # actual fake
    TP: int
    FP: int
    N: int    # actual true

    def __post_init__(self):
        if min(self.P, self.TP, self.FP, self.N) < 0:
            raise ValueError("counts must be non-negative")
        if self.TP > self.P or self.FP > self.N:
            raise ValueError("TP <= P and FP <= N required")


def confusion(predictions, labels, threshold: float = 0.5) -> ConfusionCounts:
    """Predicted fake iff probability > threshold (strict)."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError(f"{p.size} predictions vs {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    hard = p > threshold
    pos = y == 1
    return ConfusionCounts(P=int(pos.sum()), TP=int((hard & pos).sum()),
                           FP=int((hard & ~pos).sum()), N=int((~pos).sum()))


def _ratio(num: int, den: int, exact: bool, what: str):
    if den == 0:
        raise UndefinedMetricError(f"{what} is undefined (zero denominator)")
    return Fraction(num, den) if exact else num / den


def recall(c: ConfusionCounts, exact: bool = False):
    return _ratio(c.TP, c.P, exact, "recall")


def f1(c: ConfusionCounts, exact: bool = False):
    if c.P == 0:
        raise UndefinedMetricError("f1 is undefined without actual positives")
    return _ratio(2 * c.TP, c.TP + c.FP + c.P, exact, "f1")


def precision(c: ConfusionCounts, exact: bool = False):
    return _ratio(c.TP, c.TP + c.FP, exact, "precision")


def accuracy(c: ConfusionCounts, exact: bool = False):
    correct = c.TP + (c.N - c.FP)
    return _ratio(correct, c.P + c.N, exact, "accuracy")


def report(c: ConfusionCounts) -> str:
    """Tab-separated report: metric values to 6 decimals, then the counts.
    Precision is reported as NA when nothing was predicted fake."""
    lines = [f"recall\t{recall(c):.6f}", f"f1\t{f1(c):.6f}"]
    try:
        lines.append(f"precision\t{precision(c):.6f}")
    except UndefinedMetricError:
        lines.append("precision\tNA")
    lines.append(f"accuracy\t{accuracy(c):.6f}")
    lines += [f"P\t{c.P}", f"TP\t{c.TP}", f"FP\t{c.FP}", f"N\t{c.N}"]
    return "\n".join(lines) + "\n"
