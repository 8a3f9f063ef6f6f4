# services/prior_estimator.py
"""Online estimate of the target label distribution from model predictions."""
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import DimensionError, InputError
from .losses import LabelDistribution


def keep_top_k(probs: np.ndarray, k: int) -> np.ndarray:
    """Zero all but the k largest entries of each row, then renormalize rows."""
    if k <= 0:
        raise InputError(f"top_k must be positive, got {k}")
    if k >= probs.shape[1]:
        return probs
    # stable sort on the negated values keeps the lowest index among ties
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    kept = np.zeros_like(probs)
    rows = np.arange(probs.shape[0])[:, None]
    kept[rows, order] = probs[rows, order]
    return kept / kept.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class PriorEstimate:
    """
    EMA estimate Y_hat_t of the target label distribution.

    Y_hat_0 is uniform; each batch moves it toward the batch's average
    prediction by a fraction alpha.
    """

    y_hat: LabelDistribution
    step: int = 0
    alpha: float = 0.1
    top_k: Optional[int] = None

    @classmethod
    def initial(cls, num_classes: int, alpha: float = 0.1, top_k: Optional[int] = None) -> "PriorEstimate":
        if not 0.0 <= alpha <= 1.0:
            raise InputError(f"alpha must lie in [0, 1], got {alpha}")
        return cls(LabelDistribution.uniform(num_classes), 0, alpha, top_k)

    @property
    def num_classes(self) -> int:
        return self.y_hat.num_classes

    def update(self, probs: np.ndarray) -> "PriorEstimate":
        """
        Fold one batch of softmax rows into the estimate.

        Args:
            probs: n x C prediction rows

        Returns:
            New estimate with step incremented
        """
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 2 or probs.shape[0] == 0:
            raise InputError(f"update needs a non-empty n x C batch, got shape {probs.shape}")
        if probs.shape[1] != self.num_classes:
            raise DimensionError(f"batch has {probs.shape[1]} classes, estimate has {self.num_classes}")
        if self.top_k is not None:
            probs = keep_top_k(probs, self.top_k)
        batch_mean = probs.mean(axis=0)
        prev = self.y_hat.probs
        # Y_t = alpha * y_bar + (1 - alpha) * Y_{t-1}, written so y_bar == Y_{t-1} is an exact fixed point
        updated = prev + self.alpha * (batch_mean - prev)
        return replace(self, y_hat=LabelDistribution(updated), step=self.step + 1)

    def reset(self) -> "PriorEstimate":
        return replace(self, y_hat=LabelDistribution.uniform(self.num_classes), step=0)


def default_top_k(num_classes: int) -> Optional[int]:
    """Top-3 filtering only pays off with many classes."""
    return 3 if num_classes >= 100 else None
