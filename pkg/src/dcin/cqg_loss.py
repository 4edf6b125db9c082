"""Color-quality generalization loss, its gradient, and the Dice metric.

Probability masks are float arrays of shape (H, W, C); label masks are integer
arrays of shape (H, W) holding class indices in [0, C).

The loss for a geometric view prediction ``p1``, a geometric+photometric view
prediction ``p2`` and ground truth ``y`` is::

    w1 * (dice(p1, y) + ce(p1, y)) + w2 * (dice(p2, y) + ce(p2, y)) + w3 * mse(p1, p2)
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import UsageError

DICE_EPS = 1e-6
CE_FLOOR = 1e-7


@dataclass(frozen=True)
class LossWeights:
    dice_ce_geometric: float = 0.3
    dice_ce_photometric: float = 0.7
    consistency: float = 1.0

    def __post_init__(self) -> None:
        for name in ("dice_ce_geometric", "dice_ce_photometric", "consistency"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0:
                raise UsageError(f"loss weight {name} must be finite and >= 0, got {v}")
            object.__setattr__(self, name, v)

    def scaled(self, factor: float) -> LossWeights:
        return LossWeights(
            self.dice_ce_geometric * factor,
            self.dice_ce_photometric * factor,
            self.consistency * factor,
        )


@dataclass(frozen=True)
class LossBreakdown:
    dice1: float
    ce1: float
    dice2: float
    ce2: float
    mse: float
    total: float


def _check(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.ndim != 3 or pred.shape[2] < 2:
        raise UsageError(f"prediction must be (H, W, C) with C >= 2, got {pred.shape}")
    if gt.shape != pred.shape[:2]:
        raise UsageError(f"ground truth shape {gt.shape} does not match prediction {pred.shape[:2]}")
    if not np.issubdtype(gt.dtype, np.integer):
        raise UsageError("ground truth must hold integer class labels")
    if gt.size and (gt.min() < 0 or gt.max() >= pred.shape[2]):
        raise UsageError(f"ground truth labels must lie in [0, {pred.shape[2]})")
    return pred, gt


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    return (labels[..., None] == np.arange(classes)).astype(np.float64)


def dice_loss(pred: np.ndarray, gt: np.ndarray) -> float:
    """Soft Dice loss averaged uniformly over all classes."""
    pred, gt = _check(pred, gt)
    g = one_hot(gt, pred.shape[2])
    inter = np.einsum("hwc,hwc->c", pred, g)
    denom = pred.sum(axis=(0, 1)) + g.sum(axis=(0, 1))
    per_class = 1.0 - (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)
    return float(per_class.mean())


def _dice_grad(pred: np.ndarray, g: np.ndarray) -> np.ndarray:
    inter = np.einsum("hwc,hwc->c", pred, g)
    denom = pred.sum(axis=(0, 1)) + g.sum(axis=(0, 1)) + DICE_EPS
    num = 2.0 * inter + DICE_EPS
    # d/dp of 1 - num/denom, averaged over classes
    return -(2.0 * g * denom - num) / denom**2 / pred.shape[2]


def cross_entropy_loss(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean negative log-probability of the true class, clamped at 1e-7."""
    pred, gt = _check(pred, gt)
    p_true = np.take_along_axis(pred, gt[..., None], axis=2)[..., 0]
    return float(-np.log(np.maximum(p_true, CE_FLOOR)).mean())


def _ce_grad(pred: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = pred.shape[0] * pred.shape[1]
    safe = np.maximum(pred, CE_FLOOR)
    return np.where((g > 0) & (pred > CE_FLOOR), -1.0 / (n * safe), 0.0)


def mse_loss(pred1: np.ndarray, pred2: np.ndarray) -> float:
    pred1 = np.asarray(pred1, dtype=np.float64)
    pred2 = np.asarray(pred2, dtype=np.float64)
    if pred1.shape != pred2.shape:
        raise UsageError(f"shape mismatch: {pred1.shape} vs {pred2.shape}")
    return float(np.mean((pred1 - pred2) ** 2))


def cqg_loss(
    pred1: np.ndarray,
    pred2: np.ndarray,
    gt: np.ndarray,
    weights: LossWeights = LossWeights(),
) -> LossBreakdown:
    dice1, ce1 = dice_loss(pred1, gt), cross_entropy_loss(pred1, gt)
    dice2, ce2 = dice_loss(pred2, gt), cross_entropy_loss(pred2, gt)
    mse = mse_loss(pred1, pred2)
    total = (
        weights.dice_ce_geometric * (dice1 + ce1)
        + weights.dice_ce_photometric * (dice2 + ce2)
        + weights.consistency * mse
    )
    return LossBreakdown(dice1, ce1, dice2, ce2, mse, total)


def cqg_loss_gradient(
    pred1: np.ndarray,
    pred2: np.ndarray,
    gt: np.ndarray,
    weights: LossWeights = LossWeights(),
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic d(total)/d(pred1) and d(total)/d(pred2).

    Every probability entry is treated as a free variable; projecting back onto
    the simplex is left to the caller.
    """
    pred1, gt = _check(pred1, gt)
    pred2, _ = _check(pred2, gt)
    if pred1.shape != pred2.shape:
        raise UsageError(f"shape mismatch: {pred1.shape} vs {pred2.shape}")
    g = one_hot(gt, pred1.shape[2])
    d_mse = 2.0 * (pred1 - pred2) / pred1.size
    grad1 = weights.dice_ce_geometric * (_dice_grad(pred1, g) + _ce_grad(pred1, g))
    grad2 = weights.dice_ce_photometric * (_dice_grad(pred2, g) + _ce_grad(pred2, g))
    return grad1 + weights.consistency * d_mse, grad2 - weights.consistency * d_mse


def dice_per_class(pred: np.ndarray, gt: np.ndarray) -> dict[int, float]:
    """Hard Dice (0-100) for every class present in ``pred`` or ``gt``."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise UsageError(f"label mask shape mismatch: {pred.shape} vs {gt.shape}")
    scores = {}
    for c in np.union1d(np.unique(pred), np.unique(gt)):
        p = pred == c
        g = gt == c
        scores[int(c)] = 100.0 * 2.0 * np.count_nonzero(p & g) / (p.sum() + g.sum())
    return scores


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean hard Dice over classes present in either mask, on a 0-100 scale."""
    scores = dice_per_class(pred, gt)
    return float(np.mean(list(scores.values()))) if scores else 100.0
