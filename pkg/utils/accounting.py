# utils/accounting.py
"""Analytic parameter and multiply-accumulate counts for the cost table."""
import pandas as pd

from services.network import NetworkSpec


def backbone_params(spec: NetworkSpec) -> int:
    """Linear weights and biases, normalization affine pairs, and the head."""
    total = 0
    fan_in = spec.input_dim
    for i, width in enumerate(spec.hidden_dims):
        total += fan_in * width + width
        if spec.has_norm(i):
            total += 2 * width
        fan_in = width
    return total + fan_in * spec.num_classes + spec.num_classes


def backbone_macs(spec: NetworkSpec) -> int:
    """Per-sample MACs of the linear layers and the head."""
    total = 0
    fan_in = spec.input_dim
    for width in spec.hidden_dims:
        total += fan_in * width
        fan_in = width
    return total + fan_in * spec.num_classes


def adapter_params(hidden: int, feature_dim: int, num_classes: int) -> int:
    """
    Exact count for both FC-ReLU-FC branches, biases included.

    >>> adapter_params(100, 64, 10)
    78978
    """
    h, d, C = hidden, feature_dim, num_classes
    branch_a = 2 * h + h * 2 * d + 2 * d
    branch_b = 2 * h + h * (d * C + C) + (d * C + C)
    return branch_a + branch_b


def adapter_macs(hidden: int, feature_dim: int, num_classes: int) -> int:
    """MACs of one adapter evaluation; it runs once per batch, not per sample."""
    h, d, C = hidden, feature_dim, num_classes
    return (h + h * 2 * d) + (h + h * (d * C + C))


def head_extra_macs(feature_dim: int) -> int:
    """Per-sample cost of modulating features with gamma_h before the head."""
    return feature_dim


def cost_table(spec: NetworkSpec, hidden: int) -> pd.DataFrame:
    d, C = spec.feature_dim, spec.num_classes
    rows = [
        {"component": "backbone", "parameters": backbone_params(spec), "macs": backbone_macs(spec), "per": "sample"},
        {"component": "adapter", "parameters": adapter_params(hidden, d, C), "macs": adapter_macs(hidden, d, C), "per": "batch"},
        {"component": "head_modulation", "parameters": 0, "macs": head_extra_macs(d), "per": "sample"},
    ]
    return pd.DataFrame(rows, columns=["component", "parameters", "macs", "per"])
