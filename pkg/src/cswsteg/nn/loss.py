"""Binary cross-entropy with L2-norm regularization.

The error term is the mean two-sided cross-entropy; the regularization
term adds lambda times the L2 norm (not its square) of each regularized
weight tensor. Probabilities are clamped to [1e-7, 1 - 1e-7] before the
logs so perfect predictions stay finite.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import DomainError

CLAMP = 1e-7


def _check_inputs(predictions: np.ndarray, labels: np.ndarray):
    if predictions.shape != labels.shape:
        raise DomainError(
            f"predictions shape {predictions.shape} != labels shape {labels.shape}"
        )
    if predictions.size == 0:
        raise DomainError("empty prediction batch")
    if not np.isfinite(predictions).all():
        raise DomainError("predictions must be finite")
    if (predictions < 0).any() or (predictions > 1).any():
        raise DomainError("predictions must lie in [0, 1]")
    if not np.isin(labels, (0, 1)).all():
        raise DomainError("labels must be 0 or 1")


def bce_l2_loss(
    predictions,
    labels,
    reg_weights: Sequence[np.ndarray] = (),
    lam: float = 1e-3,
) -> float:
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    _check_inputs(predictions, labels)
    p = np.clip(predictions, CLAMP, 1.0 - CLAMP)
    ce = -np.mean(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))
    reg = lam * sum(np.sqrt((w**2).sum()) for w in reg_weights)
    return float(ce + reg)


def bce_grad(predictions: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(mean cross-entropy)/d(predictions), honoring the clamp exactly.

    Entries at or beyond the clamp boundary get zero gradient, matching
    the flat regions the clamp introduces in the computed loss.
    """
    p = np.clip(predictions, CLAMP, 1.0 - CLAMP)
    inside = (predictions > CLAMP) & (predictions < 1.0 - CLAMP)
    g = (-(labels / p) + (1.0 - labels) / (1.0 - p)) / predictions.size
    return np.where(inside, g, 0.0)


def l2_norm_grad(weight: np.ndarray, lam: float) -> np.ndarray:
    """Gradient of lam * ||W||_2; zero at the (non-differentiable) origin."""
    norm = np.sqrt((weight**2).sum())
    if norm == 0.0:
        return np.zeros_like(weight)
    return (lam / norm) * weight
