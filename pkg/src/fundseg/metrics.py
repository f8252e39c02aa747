"""Pixel-level segmentation metrics and Pearson correlation.

Metrics whose denominator is zero are reported as NaN ("undefined"), which
is distinct from 0 and is skipped when aggregating.
"""

import math
from dataclasses import astuple, dataclass

import numpy as np

from .errors import ContractError, UndefinedRatioError

METRIC_NAMES = ("sensitivity", "specificity", "accuracy", "precision", "dice", "jaccard")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricsReport:
    sensitivity: float
    specificity: float
    accuracy: float
    precision: float
    dice: float
    jaccard: float
    skipped: tuple = (0, 0, 0, 0, 0, 0)

    def values(self):
        return astuple(self)[: len(METRIC_NAMES)]

    def as_dict(self):
        return dict(zip(METRIC_NAMES, self.values()))


def _foreground(mask):
    m = np.asarray(mask)
    if m.dtype == bool:
        return m
    return m > 0


def confusion(pred, gt):
    p, g = _foreground(pred), _foreground(gt)
    if p.shape != g.shape:
        raise ContractError(f"mask dimensions differ: {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, tn, fn)


def _ratio(num, den):
    return num / den if den else math.nan


def report(counts):
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    return MetricsReport(
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        accuracy=_ratio(tp + tn, counts.total),
        precision=_ratio(tp, tp + fp),
        dice=_ratio(2 * tp, 2 * tp + fp + fn),
        jaccard=_ratio(tp, tp + fp + fn),
    )


def evaluate(pred, gt):
    return report(confusion(pred, gt))


def aggregate(reports):
    """Unweighted per-metric mean, skipping undefined entries."""
    reports = list(reports)
    if not reports:
        raise ContractError("aggregate needs at least one report")
    means, skipped = [], []
    for i, _ in enumerate(METRIC_NAMES):
        vals = [r.values()[i] for r in reports]
        ok = [v for v in vals if not math.isnan(v)]
        skipped.append(len(vals) - len(ok))
        means.append(math.fsum(ok) / len(ok) if ok else math.nan)
    return MetricsReport(*means, skipped=tuple(skipped))


def pearson(xs, ys):
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractError(f"pearson needs equal-length sequences, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ContractError("pearson needs at least two samples")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(np.dot(dx, dx)), float(np.dot(dy, dy))
    if sxx == 0 or syy == 0:
        raise UndefinedRatioError("correlation undefined: a sequence has zero variance")
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def dice_from_jaccard(j):
    return 2.0 * j / (1.0 + j)

