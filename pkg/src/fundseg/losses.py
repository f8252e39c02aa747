"""Mask, classification and box losses.

All reductions are means, so the two terms of the mask loss have
comparable magnitude when mixed by ``alpha``.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, UndefinedRatioError

log = logging.getLogger(__name__)

BCE_EPS = 1e-12
_warned_clamp = False


@dataclass(frozen=True)
class AlphaSchedule:
    initial: float = 0.7
    decrement: float = 0.01
    period: int = 10
    floor: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.initial <= 1.0:
            raise ContractError(f"initial alpha must be in [0, 1], got {self.initial}")
        if self.decrement < 0:
            raise ContractError(f"decrement must be >= 0, got {self.decrement}")
        if self.period < 1:
            raise ContractError(f"period must be >= 1, got {self.period}")
        if not 0.0 <= self.floor <= self.initial:
            raise ContractError(f"floor must be in [0, initial], got {self.floor}")

    @classmethod
    def spanning(cls, iterations, initial=0.7, final=0.26):
        """Period-1 schedule reaching ``final`` at the last of ``iterations`` steps."""
        step = (initial - final) / (iterations - 1) if iterations > 1 else 0.0
        return cls(initial=initial, decrement=step, period=1, floor=0.0)


def alpha_at(schedule, iteration):
    if iteration < 0:
        raise ContractError(f"iteration must be >= 0, got {iteration}")
    steps = iteration // schedule.period
    # round away accumulated binary noise so 0.7 - 0.44 prints as 0.26
    value = min(schedule.initial, round(schedule.initial - schedule.decrement * steps, 12))
    return max(schedule.floor, value)


def _check_pair(pred, gt):
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")


def bce(pred, gt):
    """Mean binary cross-entropy; predictions are clamped to [eps, 1 - eps]."""
    global _warned_clamp
    pred = ad.as_tensor(pred)
    gt = ad.as_tensor(gt)
    _check_pair(pred, gt)
    if not _warned_clamp and (np.any(pred.data < BCE_EPS) or np.any(pred.data > 1 - BCE_EPS)):
        log.warning("bce: saturated predictions clamped to [%g, 1-%g]", BCE_EPS, BCE_EPS)
        _warned_clamp = True
    p = ad.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    y = gt.data
    ll = ad.mul(Tensor(y), ad.log(p)) + ad.mul(Tensor(1.0 - y), ad.log(1.0 - p))
    return ad.neg(ad.mean(ll))


def iou_hat(pred, gt):
    """Soft IoU: sum(X*Y) / sum(X + Y - X*Y)."""
    pred = ad.as_tensor(pred)
    gt = ad.as_tensor(gt)
    _check_pair(pred, gt)
    y = Tensor(gt.data)
    inter = ad.mul(pred, y)
    union = ad.tsum(pred + y - inter)
    if union.item() <= 0:
        raise UndefinedRatioError("soft IoU undefined: prediction and ground truth are both empty")
    return ad.div(ad.tsum(inter), union)


def mask_loss(pred, gt, alpha, strict_paper=False):
    """alpha * BCE + (1 - alpha) * (1 - soft IoU).

    With ``strict_paper=True`` the IoU term enters without the ``1 -``, as
    the convex combination is literally printed; that variant rewards
    *lower* overlap and exists only for comparison runs.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 1.0:
        return bce(pred, gt)
    iou = iou_hat(pred, gt)
    iou_term = iou if strict_paper else 1.0 - iou
    if alpha == 0.0:
        return iou_term
    return alpha * bce(pred, gt) + (1.0 - alpha) * iou_term


def softmax_ce(logits, label):
    """-log softmax(logits)[label] via a max-shifted log-sum-exp."""
    logits = ad.as_tensor(logits)
    if logits.ndim != 1:
        raise DimensionError(f"logits must be 1-D, got shape {logits.shape}")
    k = logits.shape[0]
    if not (isinstance(label, (int, np.integer)) and 0 <= label < k):
        raise ContractError(f"label {label!r} outside [0, {k})")
    return ad.logsumexp(logits) - logits[int(label)]


def smooth_l1(pred, target):
    pred = ad.as_tensor(pred)
    target = ad.as_tensor(target)
    _check_pair(pred, target)
    return ad.mean(ad.huber(pred - target))
