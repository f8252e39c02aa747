"""Vertical cup-to-disc ratio and two-stage (normal / suspect) grading."""

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, GradingError

CDR_THRESHOLD = 0.5


class Grade(str, enum.Enum):
    NORMAL = "normal"
    SUSPECT = "suspect"

    @property
    def label(self):
        return int(self is Grade.SUSPECT)


@dataclass(frozen=True)
class CdrRecord:
    disc_diameter: int
    cup_diameter: int
    cdr: float
    grade: Grade
    cup_exceeds_disc: bool = False


@dataclass(frozen=True)
class GradingReport:
    sensitivity: float
    specificity: float
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int


def vertical_diameter(mask):
    """Row span (max - min + 1) of the foreground; 0 for an empty mask."""
    rows = np.flatnonzero(np.asarray(mask).any(axis=1))
    if rows.size == 0:
        return 0
    return int(rows[-1] - rows[0] + 1)


def grade(cdr, threshold=CDR_THRESHOLD):
    """Suspect iff cdr >= threshold (the boundary is graded suspect)."""
    if cdr < 0:
        raise ContractError(f"CDR must be non-negative, got {cdr}")
    return Grade.SUSPECT if cdr >= threshold else Grade.NORMAL


def vertical_cdr(disc, cup, threshold=CDR_THRESHOLD):
    d = vertical_diameter(disc)
    if d == 0:
        raise GradingError("empty disc mask: cannot normalize the cup diameter")
    c = vertical_diameter(cup)
    exceeds = c > d
    if exceeds:
        warnings.warn(f"cup diameter {c} exceeds disc diameter {d}", RuntimeWarning, stacklevel=2)
    ratio = c / d
    return CdrRecord(d, c, ratio, grade(ratio, threshold), exceeds)


def _label(x):
    if isinstance(x, Grade):
        return x.label
    if isinstance(x, str):
        return Grade(x).label
    v = int(x)
    if v not in (0, 1):
        raise ContractError(f"labels must be 0/1 or grades, got {x!r}")
    return v


def grading_report(predicted, truth):
    """Se / Sp / overall accuracy with 'suspect' as the positive class."""
    predicted, truth = list(predicted), list(truth)
    if len(predicted) != len(truth):
        raise ContractError(f"{len(predicted)} predictions vs {len(truth)} labels")
    if not predicted:
        raise ContractError("grading_report needs at least one case")
    p = np.array([_label(x) for x in predicted], dtype=bool)
    t = np.array([_label(x) for x in truth], dtype=bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(np.count_nonzero(~p & ~t))
    nan = float("nan")
    return GradingReport(
        sensitivity=tp / (tp + fn) if tp + fn else nan,
        specificity=tn / (tn + fp) if tn + fp else nan,
        accuracy=(tp + tn) / len(p),
        tp=tp, fp=fp, tn=tn, fn=fn,
    )
