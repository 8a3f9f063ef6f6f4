# services/network.py
"""Desk-scale classifier: MLP feature extractor, linear head, parameter groups."""
import copy
import hashlib
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

import gradcore as gc
from gradcore import Node

from .errors import DimensionError, InputError
from .normalization import NormLayer, normalize

logger = logging.getLogger(__name__)

FROZEN = "frozen"
TRAINABLE = "trainable"
STAGES = ("pretrain", "adapter_train", "tta")


class ParamStore:
    """
    Named parameters, each tagged frozen or trainable.

    Every entry is a persistent leaf Node: forward passes reference it
    directly, so after backward the gradient slot is `store.grad(name)`.
    """

    def __init__(self):
        self._nodes: Dict[str, Node] = {}
        self._tags: Dict[str, str] = {}

    def add(self, name: str, value, trainable: bool = False) -> Node:
        if name in self._nodes:
            raise InputError(f"parameter {name!r} already exists")
        node = gc.parameter(value, name=name)
        node.requires_grad = trainable
        self._nodes[name] = node
        self._tags[name] = TRAINABLE if trainable else FROZEN
        return node

    def __contains__(self, name: str) -> bool:
        return name in self._nodes

    def __iter__(self):
        return iter(self._nodes)

    def __len__(self) -> int:
        return len(self._nodes)

    def node(self, name: str) -> Node:
        return self._nodes[name]

    def value(self, name: str) -> np.ndarray:
        return self._nodes[name].value

    def grad(self, name: str) -> np.ndarray:
        return self._nodes[name].grad

    def tag(self, name: str) -> str:
        return self._tags[name]

    def set_trainable(self, names: Iterable[str]):
        """Make exactly `names` trainable; everything else is frozen."""
        wanted = set(names)
        unknown = wanted - set(self._nodes)
        if unknown:
            raise InputError(f"unknown parameters: {sorted(unknown)}")
        for name, node in self._nodes.items():
            trainable = name in wanted
            node.requires_grad = trainable
            self._tags[name] = TRAINABLE if trainable else FROZEN

    def trainable_names(self) -> List[str]:
        return [n for n in self._nodes if self._tags[n] == TRAINABLE]

    def items(self) -> List[Tuple[str, np.ndarray]]:
        return [(n, node.value) for n, node in self._nodes.items()]

    def zero_grad(self):
        for node in self._nodes.values():
            node.zero_grad()

    def digest(self, exclude: Sequence[str] = ()) -> str:
        """sha256 over names and raw bytes of every entry not excluded."""
        h = hashlib.sha256()
        for name in sorted(self._nodes):
            if name in exclude:
                continue
            h.update(name.encode())
            h.update(np.ascontiguousarray(self._nodes[name].value).tobytes())
        return h.hexdigest()

    def load(self, values: Dict[str, np.ndarray]):
        """Overwrite existing entries in place; shapes must match."""
        for name, arr in values.items():
            node = self._nodes.get(name)
            if node is None:
                raise InputError(f"unknown parameter {name!r}")
            if node.value.shape != arr.shape:
                raise DimensionError(f"{name}: stored {arr.shape}, expected {node.value.shape}")
            node.value[...] = arr


@dataclass(frozen=True)
class NetworkSpec:
    """Shape of the MLP backbone and head."""

    input_dim: int = 16
    hidden_dims: Tuple[int, ...] = (64, 64)
    num_classes: int = 10
    # one flag per hidden block: does the block carry a normalization layer
    norm_layers: Optional[Tuple[bool, ...]] = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise InputError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.norm_layers is not None and len(self.norm_layers) != len(self.hidden_dims):
            raise InputError("norm_layers needs one flag per hidden block")

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim

    @property
    def num_blocks(self) -> int:
        return len(self.hidden_dims)

    def has_norm(self, block: int) -> bool:
        return True if self.norm_layers is None else bool(self.norm_layers[block])


@dataclass
class AdapterOutput:
    """Corrections for the classifier layer: gamma_h, beta_h (1 x d), delta_W (d x C), delta_b (1 x C)."""

    gamma_h: Node
    beta_h: Node
    delta_W: Node
    delta_b: Node

    @classmethod
    def neutral(cls, feature_dim: int, num_classes: int) -> "AdapterOutput":
        return cls(
            gamma_h=gc.constant(np.ones((1, feature_dim))),
            beta_h=gc.constant(np.zeros((1, feature_dim))),
            delta_W=gc.constant(np.zeros((feature_dim, num_classes))),
            delta_b=gc.constant(np.zeros((1, num_classes))),
        )

    def detached(self) -> "AdapterOutput":
        return AdapterOutput(
            self.gamma_h.detach(), self.beta_h.detach(), self.delta_W.detach(), self.delta_b.detach()
        )

    def validate(self, feature_dim: int, num_classes: int):
        expected = {
            "gamma_h": (1, feature_dim),
            "beta_h": (1, feature_dim),
            "delta_W": (feature_dim, num_classes),
            "delta_b": (1, num_classes),
        }
        for name, shape in expected.items():
            node = getattr(self, name)
            if node.shape != shape:
                raise DimensionError(f"{name} has shape {node.shape}, head expects {shape}")
            if not np.all(np.isfinite(node.value)):
                raise InputError(f"{name} contains non-finite entries")


def forward_head(h: Node, params: ParamStore, adapt: AdapterOutput) -> Node:
    """
    logits = (gamma_h * h + beta_h) (W + delta_W) + (b + delta_b)

    With a neutral AdapterOutput this is exactly h W + b.
    """
    W = params.node("head.weight")
    b = params.node("head.bias")
    if h.cols != W.rows:
        raise DimensionError(f"features {h.shape} do not match head weight {W.shape}")
    adapt.validate(W.rows, W.cols)
    modulated = gc.rowwise_affine(h, adapt.gamma_h, adapt.beta_h)
    weight = gc.add(W, adapt.delta_W)
    bias = gc.add(b, adapt.delta_b)
    return gc.add_row(gc.matmul(modulated, weight), bias)


class Classifier:
    """
    f = head(F_theta(x)) where F_theta is a stack of Linear -> Norm -> ReLU blocks.

    Parameters live in `params`; normalization running statistics live on the
    NormLayer objects in `norms` (None for blocks without normalization).
    """

    def __init__(self, spec: NetworkSpec, seed: int = 0, alpha_shrink: float = 4.0, m_iabn: float = 0.01):
        self.spec = spec
        self.params = ParamStore()
        self.norms: List[Optional[NormLayer]] = []
        self.stage = "pretrain"
        rng = np.random.default_rng(seed)

        fan_in = spec.input_dim
        for i, width in enumerate(spec.hidden_dims):
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, width))
            self.params.add(f"block{i}.linear.weight", w)
            self.params.add(f"block{i}.linear.bias", np.zeros((1, width)))
            if spec.has_norm(i):
                gamma = self.params.add(f"block{i}.norm.weight", np.ones((1, width)))
                beta = self.params.add(f"block{i}.norm.bias", np.zeros((1, width)))
                self.norms.append(NormLayer(width, gamma, beta, alpha_shrink=alpha_shrink, m_iabn=m_iabn))
            else:
                self.norms.append(None)
            fan_in = width

        bound = 1.0 / np.sqrt(fan_in)
        self.params.add(
            "head.weight", rng.uniform(-bound, bound, size=(fan_in, spec.num_classes))
        )
        self.params.add("head.bias", np.zeros((1, spec.num_classes)))
        self.set_stage("pretrain")

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def set_norm_mode(self, mode: str):
        for layer in self.norms:
            if layer is not None:
                layer.mode = mode

    def forward_features(self, x, norm_mode: Optional[str] = None, update_stats: bool = True) -> Node:
        """
        h = F_theta(x).

        Args:
            x: n x input_dim batch (array or Node)
            norm_mode: normalization mode for every layer; None keeps the current one
            update_stats: let train / eval_iabn modes update running statistics

        Returns:
            n x feature_dim node
        """
        h = x if isinstance(x, Node) else gc.constant(x)
        if h.cols != self.spec.input_dim:
            raise DimensionError(
                f"input has {h.cols} columns, network expects {self.spec.input_dim}"
            )
        if norm_mode is not None:
            self.set_norm_mode(norm_mode)
        for i, layer in enumerate(self.norms):
            h = gc.matmul(h, self.params.node(f"block{i}.linear.weight"))
            h = gc.add_row(h, self.params.node(f"block{i}.linear.bias"))
            if layer is not None:
                h = normalize(h, layer, update_stats=update_stats)
            h = gc.relu(h)
        return h

    def forward_head(self, h: Node, adapt: Optional[AdapterOutput] = None) -> Node:
        if adapt is None:
            adapt = AdapterOutput.neutral(self.feature_dim, self.num_classes)
        return forward_head(h, self.params, adapt)

    def forward(self, x, norm_mode: Optional[str] = None, adapt: Optional[AdapterOutput] = None,
                update_stats: bool = True) -> Node:
        return self.forward_head(self.forward_features(x, norm_mode, update_stats), adapt)

    def norm_affine_names(self, blocks: Optional[Iterable[int]] = None) -> List[str]:
        blocks = range(self.spec.num_blocks) if blocks is None else blocks
        names = []
        for i in blocks:
            if self.norms[i] is not None:
                names += [f"block{i}.norm.weight", f"block{i}.norm.bias"]
        return names

    def set_stage(self, stage: str, freeze_top: int = 0):
        """
        Partition parameters for a pipeline stage.

        pretrain: everything trainable. adapter_train: everything frozen.
        tta: only the normalization affine parameters of the lowest
        num_blocks - freeze_top blocks.
        """
        if stage not in STAGES:
            raise InputError(f"unknown stage {stage!r}; expected one of {STAGES}")
        if stage == "pretrain":
            self.params.set_trainable(list(self.params))
        elif stage == "adapter_train":
            self.params.set_trainable([])
        else:
            keep = max(self.spec.num_blocks - max(freeze_top, 0), 0)
            self.params.set_trainable(self.norm_affine_names(range(keep)))
        self.stage = stage
        logger.debug(f"Stage {stage}: trainable={self.params.trainable_names()}")

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.norms):
            if layer is not None:
                out[f"block{i}.norm.running_mean"] = layer.running_mean
                out[f"block{i}.norm.running_var"] = layer.running_var
        return out

    def load_buffers(self, values: Dict[str, np.ndarray]):
        for name, arr in values.items():
            block, _, stat = name.split(".")
            layer = self.norms[int(block[len("block"):])]
            if layer is None or stat not in ("running_mean", "running_var"):
                raise InputError(f"unknown buffer {name!r}")
            setattr(layer, stat, np.array(arr, dtype=np.float64))

    def copy(self) -> "Classifier":
        """Independent copy; adapting the copy never touches this model."""
        return copy.deepcopy(self)

    def predict_proba(self, x, norm_mode: str = "eval_source") -> np.ndarray:
        logits = self.forward(x, norm_mode=norm_mode, update_stats=False)
        return gc.softmax_rows(logits.value)
