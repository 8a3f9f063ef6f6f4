# gradcore/ops.py
"""
Differentiable 2-D operations.

Every op takes Nodes, returns a new Node and records a backward function that
maps the upstream gradient to one gradient per parent. There is no general
broadcasting: row-vector operands (1 x d) are only accepted by the ops that
say so.
"""
from typing import Optional, Sequence

import numpy as np

from .node import DimensionError, Node


def _check_same_shape(a: Node, b: Node, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _check_row(x: Node, row: Node, op: str, label: str = "row"):
    if row.rows != 1 or row.cols != x.cols:
        raise DimensionError(
            f"{op}: {label} must be 1x{x.cols} to match {x.shape}, got {row.shape}"
        )


def matmul(a: Node, b: Node) -> Node:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        return g @ bv.T, av.T @ g

    return Node(av @ bv, (a, b), "matmul", backward)


def add(a: Node, b: Node) -> Node:
    _check_same_shape(a, b, "add")
    return Node(a.value + b.value, (a, b), "add", lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _check_same_shape(a, b, "sub")
    return Node(a.value - b.value, (a, b), "sub", lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    """Elementwise product."""
    _check_same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return Node(av * bv, (a, b), "mul", lambda g: (g * bv, g * av))


def scale(x: Node, factor: float) -> Node:
    factor = float(factor)
    return Node(x.value * factor, (x,), "scale", lambda g: (g * factor,))


def add_row(x: Node, row: Node) -> Node:
    """x + row with the 1 x d row repeated over every row of x."""
    _check_row(x, row, "add_row")

    def backward(g):
        return g, g.sum(axis=0, keepdims=True)

    return Node(x.value + row.value, (x, row), "add_row", backward)


def rowwise_affine(x: Node, gamma: Node, beta: Node) -> Node:
    """out[i, j] = gamma[j] * x[i, j] + beta[j]."""
    _check_row(x, gamma, "rowwise_affine", "gamma")
    _check_row(x, beta, "rowwise_affine", "beta")
    xv, gv = x.value, gamma.value

    def backward(g):
        return (
            g * gv,
            (g * xv).sum(axis=0, keepdims=True),
            g.sum(axis=0, keepdims=True),
        )

    return Node(xv * gv + beta.value, (x, gamma, beta), "rowwise_affine", backward)


def relu(x: Node) -> Node:
    mask = x.value > 0
    return Node(np.where(mask, x.value, 0.0), (x,), "relu", lambda g: (g * mask,))


def exp(x: Node) -> Node:
    with np.errstate(over="ignore"):
        out = np.exp(x.value)
    return Node(out, (x,), "exp", lambda g: (g * out,))


def log(x: Node, floor: Optional[float] = None) -> Node:
    """
    Natural log. With a floor, entries below it are clamped first and pass
    no gradient.
    """
    xv = x.value
    if floor is None:
        safe = xv
        mask = np.ones_like(xv, dtype=bool)
    else:
        mask = xv > floor
        safe = np.where(mask, xv, floor)
    return Node(np.log(safe), (x,), "log", lambda g: (np.where(mask, g / safe, 0.0),))


def power(x: Node, exponent: float) -> Node:
    """Elementwise x ** exponent, for strictly positive x."""
    exponent = float(exponent)
    xv = x.value
    out = np.power(xv, exponent)

    def backward(g):
        return (g * exponent * np.power(xv, exponent - 1.0),)

    return Node(out, (x,), "power", backward)


def clamp_min(x: Node, lower: float) -> Node:
    """max(x, lower); gradient flows only where x > lower."""
    mask = x.value > lower
    return Node(np.where(mask, x.value, lower), (x,), "clamp_min", lambda g: (g * mask,))


def soft_shrink(x: Node, width: np.ndarray) -> Node:
    """sign(x) * max(|x| - width, 0) with a constant, nonnegative width of x's shape."""
    width = np.broadcast_to(np.asarray(width, dtype=np.float64), x.shape)
    xv = x.value
    mask = np.abs(xv) > width
    # width may be inf; the mask keeps the subtraction finite
    out = np.where(mask, np.sign(xv) * (np.abs(xv) - np.where(mask, width, 0.0)), 0.0)
    return Node(out, (x,), "soft_shrink", lambda g: (g * mask,))


def row_mean(x: Node) -> Node:
    """Mean over rows: n x d -> 1 x d."""
    n = x.rows

    def backward(g):
        return (np.repeat(g / n, n, axis=0),)

    return Node(x.value.mean(axis=0, keepdims=True), (x,), "row_mean", backward)


def reduce_sum(x: Node) -> Node:
    """Sum of all entries as a 1x1 node."""
    shape = x.shape
    return Node(
        np.array([[x.value.sum()]]), (x,), "reduce_sum",
        lambda g: (np.full(shape, g[0, 0]),),
    )


def log_softmax(x: Node) -> Node:
    if x.cols < 2:
        raise DimensionError(f"log_softmax needs at least 2 columns, got {x.shape}")
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return Node(out, (x,), "log_softmax", backward)


def softmax(x: Node) -> Node:
    return exp(log_softmax(x))


def slice_cols(x: Node, start: int, stop: int) -> Node:
    if not 0 <= start < stop <= x.cols:
        raise DimensionError(f"slice_cols: [{start}, {stop}) outside {x.shape}")
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return Node(x.value[:, start:stop].copy(), (x,), "slice_cols", backward)


def reshape(x: Node, rows: int, cols: int) -> Node:
    """Row-major reshape."""
    if rows * cols != x.value.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as ({rows}, {cols})")
    shape = x.shape
    return Node(
        x.value.reshape(rows, cols).copy(), (x,), "reshape",
        lambda g: (g.reshape(shape),),
    )


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Plain numpy softmax for inference paths that need no graph."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def check_gradients(
    fn,
    inputs: Sequence[Node],
    step: float = 1e-5,
) -> float:
    """
    Compare analytic gradients of a scalar-valued fn against central differences.

    Returns the largest relative error over all entries of all inputs,
    measured as |a - n| / max(1e-8, |a| + |n|).
    """
    for node in inputs:
        node.zero_grad()
    fn(*inputs).backward()
    analytic = [node.grad.copy() for node in inputs]

    worst = 0.0
    for node, grad in zip(inputs, analytic):
        for idx in np.ndindex(*node.shape):
            original = node.value[idx]
            node.value[idx] = original + step
            up = fn(*inputs).item()
            node.value[idx] = original - step
            down = fn(*inputs).item()
            node.value[idx] = original
            numeric = (up - down) / (2 * step)
            err = abs(grad[idx] - numeric) / max(1e-8, abs(grad[idx]) + abs(numeric))
            worst = max(worst, err)
    return worst
