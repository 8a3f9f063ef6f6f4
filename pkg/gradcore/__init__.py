# gradcore/__init__.py
"""Dense 2-D arrays with reverse-mode differentiation."""
from .node import DimensionError, Node, NonFiniteError, as_matrix, constant, parameter, zero_grads
from .ops import (
    add,
    add_row,
    check_gradients,
    clamp_min,
    exp,
    log,
    log_softmax,
    matmul,
    mul,
    power,
    reduce_sum,
    relu,
    reshape,
    row_mean,
    rowwise_affine,
    scale,
    slice_cols,
    soft_shrink,
    softmax,
    softmax_rows,
    sub,
)

__all__ = [
    "DimensionError",
    "Node",
    "NonFiniteError",
    "as_matrix",
    "constant",
    "parameter",
    "zero_grads",
    "add",
    "add_row",
    "check_gradients",
    "clamp_min",
    "exp",
    "log",
    "log_softmax",
    "matmul",
    "mul",
    "power",
    "reduce_sum",
    "relu",
    "reshape",
    "row_mean",
    "rowwise_affine",
    "scale",
    "slice_cols",
    "soft_shrink",
    "softmax",
    "softmax_rows",
    "sub",
]
