"""Segmentation losses and their analytic gradients.

All functions take a flat binary target ``y`` and a flat prediction ``p``
of equal length. The smoothed overlap loss adds ``smooth`` to numerator
and denominator so the empty-target case is well defined. The modulating
loss penalizes only positive-target voxels (the one-sided form, as used
here; the classic two-sided variant is intentionally not implemented).
Gradients are with respect to ``p`` and back the finite-difference checks
plus the survival MLP's training loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["LossParams", "dice_loss", "focal_loss", "log_cosh_dice_focal",
           "loss_gradient", "LOSS_KINDS", "HAND_EXAMPLES"]

LOSS_KINDS = ("dice", "focal", "log_cosh_dice_focal")


@dataclass
class LossParams:
    gamma: float = 2.0     # modulating exponent on (1 - p)
    smooth: float = 1.0    # additive smoothing of the overlap ratio
    epsilon: float = 1e-7  # probability clamp before logarithms

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.smooth <= 0:
            raise ValueError("smooth must be > 0")
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError("epsilon must be in (0, 0.5)")


# Worked examples with closed-form values, replayed by the test suite.
# Rows: (loss kind, y, p, params, exact expected value).
HAND_EXAMPLES = (
    # perfect match: numerator and denominator both 2 + smooth
    ("dice", (1.0, 0.0), (1.0, 0.0), LossParams(), 0.0),
    # 1 - (2*0.5 + 1)/(1 + 1 + 1)
    ("dice", (1.0, 0.0), (0.5, 0.5), LossParams(), 1.0 / 3.0),
    # empty target is defined through the smoothing term
    ("dice", (0.0, 0.0, 0.0), (0.0, 0.0, 0.0), LossParams(), 0.0),
    # 1 - (2*1.5 + 1)/(2 + 2 + 1)
    ("dice", (1.0, 1.0, 0.0, 0.0), (1.0, 0.5, 0.5, 0.0), LossParams(), 0.2),
    # 1 - (0 + 2)/(1 + 0 + 2)
    ("dice", (1.0,), (0.0,), LossParams(smooth=2.0), 1.0 / 3.0),
    # -(1-0.5)^2 * ln(0.5)
    ("focal", (1.0,), (0.5,), LossParams(gamma=2.0), 0.25 * math.log(2.0)),
    # gamma 0 reduces to cross-entropy: -ln(e^-1)
    ("focal", (1.0,), (math.exp(-1.0),), LossParams(gamma=0.0), 1.0),
    # background voxels contribute nothing
    ("focal", (0.0, 0.0), (0.9, 0.1), LossParams(), 0.0),
    # two positives at p=0.5, gamma 1: mean of 0.5*ln(2)
    ("focal", (1.0, 1.0), (0.5, 0.5), LossParams(gamma=1.0),
     0.5 * math.log(2.0)),
    # ln(cosh(1/3)) + (1/2) * 0.25 * ln(2)
    ("log_cosh_dice_focal", (1.0, 0.0), (0.5, 0.5), LossParams(),
     math.log(math.cosh(1.0 / 3.0)) + 0.125 * math.log(2.0)),
)


def _check_pair(y, p, p_range=True):
    y = np.asarray(y, dtype=np.float64).ravel()
    p = np.asarray(p, dtype=np.float64).ravel()
    if y.shape != p.shape:
        raise ValueError(f"length mismatch: y has {y.size}, p has {p.size}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("y must be binary")
    if p_range and p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise ValueError("p must lie in [0, 1]")
    return y, p


def dice_loss(y, p, params: LossParams = LossParams()) -> float:
    """1 - (2*sum(y*p) + smooth) / (sum(y) + sum(p) + smooth), in [0, 1)."""
    y, p = _check_pair(y, p)
    num = 2.0 * float(np.dot(y, p)) + params.smooth
    den = float(y.sum()) + float(p.sum()) + params.smooth
    return 1.0 - num / den


def focal_loss(y, p, params: LossParams = LossParams()) -> float:
    """-(1/N) * sum over positive voxels of (1-p)^gamma * ln(p)."""
    y, p = _check_pair(y, p)
    if y.size == 0:
        raise ValueError("empty arrays")
    pc = np.clip(p, params.epsilon, 1.0 - params.epsilon)
    terms = y * (1.0 - pc) ** params.gamma * np.log(pc)
    return float(-terms.sum() / y.size)


def log_cosh_dice_focal(y, p, params: LossParams = LossParams()) -> float:
    """log(cosh(overlap loss)) plus the modulating loss."""
    return float(np.log(np.cosh(dice_loss(y, p, params)))) + focal_loss(y, p, params)


def _dice_grad(y, p, params):
    num = 2.0 * float(np.dot(y, p)) + params.smooth
    den = float(y.sum()) + float(p.sum()) + params.smooth
    # d/dp_i of 1 - num/den with num, den linear in p_i
    return -(2.0 * y * den - num) / den ** 2


def _focal_grad(y, p, params):
    g = params.gamma
    one_m = 1.0 - p
    with np.errstate(divide="ignore", invalid="ignore"):
        if g == 0.0:
            d = -1.0 / p
        else:
            d = g * one_m ** (g - 1.0) * np.log(p) - one_m ** g / p
    return y * d / y.size


def loss_gradient(loss_kind: str, y, p, params: LossParams = LossParams()) -> np.ndarray:
    """Analytic d(loss)/dp for the given loss kind.

    The focal variants clamp probabilities before taking logs, so their
    gradient is undefined on or beyond the clamp boundary; such inputs
    raise. The plain overlap loss has no clamp and accepts all of [0, 1].
    """
    y, p = _check_pair(y, p)
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}; expected one of {LOSS_KINDS}")
    if loss_kind == "dice":
        return _dice_grad(y, p, params)
    if p.size and (p.min() <= params.epsilon or p.max() >= 1.0 - params.epsilon):
        raise ValueError(
            "gradient undefined at the probability clamp boundary; "
            f"p must lie strictly inside ({params.epsilon}, {1.0 - params.epsilon})")
    if loss_kind == "focal":
        return _focal_grad(y, p, params)
    d = dice_loss(y, p, params)
    return np.tanh(d) * _dice_grad(y, p, params) + _focal_grad(y, p, params)
