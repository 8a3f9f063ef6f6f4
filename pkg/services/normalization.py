# services/normalization.py
"""
Normalization layers and the statistic regimes used during adaptation.

Modes:
    train        batch statistics, running stats updated with momentum_stats
    eval_source  running statistics only
    eval_batch   current batch statistics, no running update (BN-Stats)
    eval_iabn    running statistics pulled toward batch statistics by
                 soft-shrinkage, running stats updated with m_iabn
"""
from typing import Tuple

import numpy as np

import gradcore as gc
from gradcore import Node

from .errors import DegenerateBatchError, DimensionError, InputError

NORM_MODES = ("train", "eval_source", "eval_batch", "eval_iabn")
VAR_FLOOR = 1e-8


class NormLayer:
    """
    Per-channel normalization with affine gamma/beta.

    gamma and beta are leaf Nodes owned by the model's ParamStore, so the
    optimizer sees them; running statistics are buffers kept here.
    """

    def __init__(
        self,
        width: int,
        gamma: Node,
        beta: Node,
        mode: str = "train",
        momentum_stats: float = 0.1,
        alpha_shrink: float = 4.0,
        m_iabn: float = 0.01,
    ):
        if gamma.shape != (1, width) or beta.shape != (1, width):
            raise DimensionError(
                f"affine params must be 1x{width}, got {gamma.shape} and {beta.shape}"
            )
        self.width = width
        self.gamma = gamma
        self.beta = beta
        self.running_mean = np.zeros((1, width))
        self.running_var = np.ones((1, width))
        self.momentum_stats = momentum_stats
        self.alpha_shrink = alpha_shrink
        self.m_iabn = m_iabn
        self.mode = mode

    @property
    def mode(self) -> str:
        return self._mode

    @mode.setter
    def mode(self, value: str):
        if value not in NORM_MODES:
            raise InputError(f"unknown normalization mode {value!r}; expected one of {NORM_MODES}")
        self._mode = value

    def corrected_stats(self, x: Node) -> Tuple[Node, Node]:
        """
        IABN statistics: running stats shifted toward the batch stats by
        soft-shrinkage of their difference.

        Deviations within alpha standard errors of the running estimate are
        treated as sampling noise and dropped.
        """
        n = x.rows
        batch_mean = gc.row_mean(x)
        centered = gc.add_row(x, gc.scale(batch_mean, -1.0))
        batch_var = gc.row_mean(gc.mul(centered, centered))

        s2 = self.running_var
        lam_mean = self.alpha_shrink * np.sqrt(s2 / n)
        lam_var = self.alpha_shrink * np.sqrt(2.0 * s2 ** 2 / (n - 1))

        run_mean = gc.constant(self.running_mean)
        run_var = gc.constant(s2)
        mean = gc.add(run_mean, gc.soft_shrink(gc.sub(batch_mean, run_mean), lam_mean))
        var = gc.add(run_var, gc.soft_shrink(gc.sub(batch_var, run_var), lam_var))
        return mean, var

    def _update_running(self, batch_mean: np.ndarray, batch_var: np.ndarray, n: int, momentum: float):
        unbiased = batch_var * n / (n - 1)
        self.running_mean = (1.0 - momentum) * self.running_mean + momentum * batch_mean
        self.running_var = np.maximum(
            (1.0 - momentum) * self.running_var + momentum * unbiased, VAR_FLOOR
        )


def _standardize(x: Node, mean: Node, var: Node) -> Node:
    inv_std = gc.power(gc.clamp_min(var, VAR_FLOOR), -0.5)
    centered = gc.add_row(x, gc.scale(mean, -1.0))
    zeros = gc.constant(np.zeros((1, x.cols)))
    return gc.rowwise_affine(centered, inv_std, zeros)


def normalize(x: Node, layer: NormLayer, update_stats: bool = True) -> Node:
    """
    Standardize x under the layer's mode, then apply gamma/beta.

    Args:
        x: n x width activations
        layer: the normalization layer
        update_stats: allow modes that track running statistics to update them

    Returns:
        Normalized n x width node with a gradient path to gamma and beta
    """
    if x.cols != layer.width:
        raise DimensionError(f"normalize: input {x.shape} does not match layer width {layer.width}")
    mode = layer.mode
    n = x.rows
    if mode in ("train", "eval_batch", "eval_iabn") and n < 2:
        raise DegenerateBatchError(f"{mode} needs at least 2 samples, got {n}")

    if mode == "eval_source":
        mean = gc.constant(layer.running_mean)
        var = gc.constant(layer.running_var)
    elif mode == "eval_iabn":
        mean, var = layer.corrected_stats(x)
    else:
        mean = gc.row_mean(x)
        centered = gc.add_row(x, gc.scale(mean, -1.0))
        var = gc.row_mean(gc.mul(centered, centered))

    out = _standardize(x, mean, var)

    if update_stats and mode in ("train", "eval_iabn"):
        batch_mean = x.value.mean(axis=0, keepdims=True)
        batch_var = x.value.var(axis=0, keepdims=True)
        momentum = layer.momentum_stats if mode == "train" else layer.m_iabn
        layer._update_running(batch_mean, batch_var, n, momentum)

    return gc.rowwise_affine(out, layer.gamma, layer.beta)


def iabn_corrected_mean(layer: NormLayer, x: np.ndarray) -> np.ndarray:
    """Corrected mean of eval_iabn without building a graph."""
    mean, _ = layer.corrected_stats(gc.constant(x))
    return mean.value
