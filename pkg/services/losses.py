# services/losses.py
"""Training and adaptation objectives."""
from dataclasses import dataclass
from typing import Sequence

import numpy as np

import gradcore as gc
from gradcore import Node

from .errors import DimensionError, InputError

PROB_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class LabelDistribution:
    """Probability vector over C classes."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64).reshape(-1)
        if probs.size < 2:
            raise InputError(f"a label distribution needs at least 2 classes, got {probs.size}")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise InputError("label distribution entries must be finite and nonnegative")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise InputError(f"label distribution sums to {probs.sum():.12f}, not 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, num_classes: int) -> "LabelDistribution":
        return cls(np.full(num_classes, 1.0 / num_classes))

    @classmethod
    def from_counts(cls, counts: Sequence[float]) -> "LabelDistribution":
        counts = np.asarray(counts, dtype=np.float64)
        if counts.sum() <= 0:
            raise InputError("counts must have a positive total")
        return cls(counts / counts.sum())

    @property
    def num_classes(self) -> int:
        return self.probs.size

    def reversed(self) -> "LabelDistribution":
        return LabelDistribution(self.probs[::-1].copy())

    def log(self) -> np.ndarray:
        """Elementwise log with the probability floor applied."""
        return np.log(np.maximum(self.probs, PROB_FLOOR))

    def as_row(self) -> np.ndarray:
        return self.probs.reshape(1, -1)

    def l1(self, other: "LabelDistribution") -> float:
        return float(np.abs(self.probs - other.probs).sum())


def _check_labels(logits: Node, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size != logits.rows:
        raise DimensionError(f"{labels.size} labels for {logits.rows} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.cols):
        raise InputError(f"labels must lie in [0, {logits.cols}), got range [{labels.min()}, {labels.max()}]")
    return labels


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(logits: Node, labels) -> Node:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = _check_labels(logits, labels)
    if logits.rows == 0:
        raise InputError("cross_entropy on an empty batch")
    picked = gc.mul(gc.log_softmax(logits), gc.constant(_one_hot(labels, logits.cols)))
    return gc.scale(gc.reduce_sum(picked), -1.0 / logits.rows)


def generalized_logit_adjusted(logits: Node, labels, pi_s: LabelDistribution, tau: float) -> Node:
    """
    Cross-entropy on logits + tau * log(pi_s).

    tau = 0 is plain cross-entropy, tau = 1 balanced softmax, tau = 2 inverse softmax.
    """
    if pi_s.num_classes != logits.cols:
        raise DimensionError(f"pi_s has {pi_s.num_classes} classes, logits have {logits.cols}")
    shift = gc.constant(float(tau) * pi_s.log().reshape(1, -1))
    return cross_entropy(gc.add_row(logits, shift), labels)


def balanced_softmax(logits: Node, labels, pi_s: LabelDistribution) -> Node:
    return generalized_logit_adjusted(logits, labels, pi_s, tau=1.0)


def _row_entropy_sum(probs: Node, log_probs: Node) -> Node:
    return gc.scale(gc.reduce_sum(gc.mul(probs, log_probs)), -1.0)


def entropy_loss(logits: Node) -> Node:
    """Mean Shannon entropy (natural log) of softmax(logits) rows."""
    if logits.rows == 0:
        raise InputError("entropy_loss on an empty batch")
    log_p = gc.log_softmax(logits)
    return gc.scale(_row_entropy_sum(gc.exp(log_p), log_p), 1.0 / logits.rows)


def info_max_loss(logits: Node) -> Node:
    """Mean per-sample entropy minus the entropy of the batch-mean prediction."""
    if logits.rows < 2:
        raise InputError(f"info_max_loss needs at least 2 rows, got {logits.rows}")
    mean_p = gc.row_mean(gc.softmax(logits))
    diversity = _row_entropy_sum(mean_p, gc.log(mean_p, floor=PROB_FLOOR))
    return gc.sub(entropy_loss(logits), diversity)


def pseudo_label_loss(logits: Node) -> Node:
    """Cross-entropy against the model's own argmax (ties go to the lowest index)."""
    labels = np.argmax(logits.value, axis=1)
    return cross_entropy(logits, labels)


def posthoc_logit_adjust(
    logits: np.ndarray,
    target_prior: LabelDistribution,
    pi_s: LabelDistribution,
) -> np.ndarray:
    """Inference-time prior correction: logits + log(target) - log(pi_s)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] != target_prior.num_classes or target_prior.num_classes != pi_s.num_classes:
        raise DimensionError(
            f"logits width {logits.shape[-1]} vs priors {target_prior.num_classes}/{pi_s.num_classes}"
        )
    return logits + (target_prior.log() - pi_s.log()).reshape(1, -1)
