# services/label_shift_adapter.py
"""
Label shift adapter.

A small two-branch FC-ReLU-FC network that maps a label distribution,
summarized to one scalar through a fixed mapping vector, to corrections
(gamma_h, beta_h, delta_W, delta_b) of the frozen classifier head.
"""
import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, Optional, Tuple

import numpy as np

import gradcore as gc
from gradcore import Node

from .errors import DimensionError, DivergenceError, InputError, StageError
from .losses import LabelDistribution, generalized_logit_adjusted
from .network import AdapterOutput, Classifier, ParamStore, forward_head
from .optimizer import SGD

logger = logging.getLogger(__name__)

COMPONENTS = ("gamma_h", "beta_h", "delta_W", "delta_b")
ALL_COMPONENTS: FrozenSet[str] = frozenset(COMPONENTS)

# The seven masks of the component ablation, in report order.
ABLATION_MASKS: Tuple[Tuple[str, ...], ...] = (
    ("gamma_h",),
    ("beta_h",),
    ("delta_W",),
    ("delta_b",),
    ("gamma_h", "beta_h"),
    ("delta_W", "delta_b"),
    COMPONENTS,
)

# Names of the three conditioning distributions, matched to the tau triple order.
BRANCHES = ("source", "uniform", "reversed")


def parse_components(value) -> FrozenSet[str]:
    """Accept an iterable of names or a comma/plus separated string; 'all' means every component."""
    if isinstance(value, str):
        value = value.strip()
        if value == "all":
            return ALL_COMPONENTS
        if value in ("", "none"):
            return frozenset()
        value = [v.strip() for v in value.replace("+", ",").split(",") if v.strip()]
    names = frozenset(value)
    unknown = names - ALL_COMPONENTS
    if unknown:
        raise InputError(f"unknown adapter components {sorted(unknown)}; expected a subset of {COMPONENTS}")
    return names


def mask_label(components: Iterable[str]) -> str:
    names = [c for c in COMPONENTS if c in set(components)]
    if len(names) == len(COMPONENTS):
        return "all"
    return "+".join(names) if names else "none"


class MappingVector:
    """
    Fixed vector m in [-1, 1]^C turning a label distribution into a scalar.

    The most frequent training class gets -1 and the rarest +1, with equal
    steps in between, so m.u == 0 and head-heavy distributions map below zero.
    """

    def __init__(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.size < 2:
            raise InputError("a mapping vector needs at least 2 classes")
        self.values = values

    @classmethod
    def from_prior(cls, pi_s: LabelDistribution) -> "MappingVector":
        C = pi_s.num_classes
        order = np.argsort(-pi_s.probs, kind="stable")
        rank = np.empty(C, dtype=np.int64)
        rank[order] = np.arange(C)
        # integer numerators keep rank r and rank C-1-r exact negatives of each other
        return cls((2 * rank - (C - 1)) / (C - 1))

    @property
    def num_classes(self) -> int:
        return self.values.size


def map_distribution(m: MappingVector, pi: LabelDistribution) -> float:
    """Inner product m.pi, summed exactly so the uniform distribution maps to 0."""
    if m.num_classes != pi.num_classes:
        raise DimensionError(f"mapping vector has {m.num_classes} classes, distribution has {pi.num_classes}")
    return math.fsum(m.values * pi.probs)


def _branch_params(store: ParamStore, prefix: str, hidden: int, out_dim: int, rng: np.random.Generator):
    store.add(f"{prefix}.fc1.weight", rng.uniform(-1.0, 1.0, size=(1, hidden)), trainable=True)
    store.add(f"{prefix}.fc1.bias", rng.uniform(-1.0, 1.0, size=(1, hidden)), trainable=True)
    store.add(f"{prefix}.fc2.weight", np.zeros((hidden, out_dim)), trainable=True)
    store.add(f"{prefix}.fc2.bias", np.zeros((1, out_dim)), trainable=True)


class LabelShiftAdapter:
    """
    G_phi: scalar -> (gamma_h, beta_h, delta_W, delta_b).

    Branch A emits 2d values (gamma_h raw, beta_h), branch B emits dC + C
    values (delta_W row-major, then delta_b). Final layers start at zero, so
    an untrained adapter is exactly neutral.
    """

    def __init__(
        self,
        feature_dim: int,
        num_classes: int,
        mapping: MappingVector,
        hidden: int = 100,
        components: Iterable[str] = COMPONENTS,
        seed: int = 0,
    ):
        if mapping.num_classes != num_classes:
            raise DimensionError(f"mapping vector has {mapping.num_classes} classes, head has {num_classes}")
        if hidden < 1:
            raise InputError(f"hidden width must be positive, got {hidden}")
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.hidden = hidden
        self.mapping = mapping
        self.components = parse_components(components)
        self.params = ParamStore()
        rng = np.random.default_rng(seed)
        _branch_params(self.params, "branch_a", hidden, 2 * feature_dim, rng)
        _branch_params(self.params, "branch_b", hidden, feature_dim * num_classes + num_classes, rng)

    def num_parameters(self) -> int:
        return int(sum(value.size for _, value in self.params.items()))

    def _branch(self, prefix: str, s: Node) -> Node:
        p = self.params.node
        hidden = gc.relu(gc.add_row(gc.matmul(s, p(f"{prefix}.fc1.weight")), p(f"{prefix}.fc1.bias")))
        return gc.add_row(gc.matmul(hidden, p(f"{prefix}.fc2.weight")), p(f"{prefix}.fc2.bias"))

    def forward(self, scalar) -> AdapterOutput:
        """
        Evaluate both branches at one scalar input.

        Args:
            scalar: float or 1x1 Node

        Returns:
            AdapterOutput; masked-off components are neutral constants
        """
        s = scalar if isinstance(scalar, Node) else gc.constant([[float(scalar)]])
        d, C = self.feature_dim, self.num_classes
        out = AdapterOutput.neutral(d, C)

        if self.components & {"gamma_h", "beta_h"}:
            a = self._branch("branch_a", s)
            if "gamma_h" in self.components:
                out.gamma_h = gc.add(gc.constant(np.ones((1, d))), gc.slice_cols(a, 0, d))
            if "beta_h" in self.components:
                out.beta_h = gc.slice_cols(a, d, 2 * d)

        if self.components & {"delta_W", "delta_b"}:
            b = self._branch("branch_b", s)
            if "delta_W" in self.components:
                out.delta_W = gc.reshape(gc.slice_cols(b, 0, d * C), d, C)
            if "delta_b" in self.components:
                out.delta_b = gc.slice_cols(b, d * C, d * C + C)
        return out

    def condition(self, prior: LabelDistribution) -> AdapterOutput:
        """G_phi(m.prior)."""
        return self.forward(map_distribution(self.mapping, prior))

    def neutral(self) -> AdapterOutput:
        return AdapterOutput.neutral(self.feature_dim, self.num_classes)

    def entries(self) -> Dict[str, np.ndarray]:
        """Checkpoint entries: parameters, mapping vector and component mask."""
        out = {name: value for name, value in self.params.items()}
        out["mapping"] = self.mapping.values.reshape(1, -1)
        out["components"] = np.array([[1.0 if c in self.components else 0.0 for c in COMPONENTS]])
        return out

    @classmethod
    def from_entries(cls, entries: Dict[str, np.ndarray]) -> "LabelShiftAdapter":
        try:
            mapping = MappingVector(entries["mapping"])
            mask = entries["components"].reshape(-1)
            hidden, two_d = entries["branch_a.fc2.weight"].shape
            tail = entries["branch_b.fc2.weight"].shape[1]
        except KeyError as e:
            raise InputError(f"adapter entries lack {e}") from e
        C = mapping.num_classes
        d = two_d // 2
        if d * C + C != tail:
            raise DimensionError(f"branch B width {tail} does not match d={d}, C={C}")
        components = [c for c, flag in zip(COMPONENTS, mask) if flag > 0.5]
        adapter = cls(d, C, mapping, hidden=hidden, components=components)
        adapter.params.load({k: v for k, v in entries.items() if k in adapter.params})
        return adapter

    def with_components(self, components: Iterable[str]) -> "LabelShiftAdapter":
        clone = self.copy()
        clone.components = parse_components(components)
        return clone

    def copy(self) -> "LabelShiftAdapter":
        return copy.deepcopy(self)


def adapter_forward(adapter: LabelShiftAdapter, scalar_input) -> AdapterOutput:
    return adapter.forward(scalar_input)


@dataclass(frozen=True)
class AdapterSchedule:
    """Hyperparameters of adapter training."""

    iterations: int = 1000
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    # tau for (pi_s, uniform, reversed pi_s)
    taus: Tuple[float, float, float] = (0.0, 1.0, 2.0)
    seed: int = 0


@dataclass
class AdapterTrainingReport:
    iterations: int
    final_losses: Dict[str, float] = field(default_factory=dict)
    branch_counts: Dict[str, int] = field(default_factory=dict)


def conditioning_targets(pi_s: LabelDistribution, taus: Tuple[float, float, float]):
    """The three (name, distribution, tau) triples adapter training samples from."""
    if len(taus) != 3:
        raise InputError(f"taus needs three values, got {len(taus)}")
    dists = (pi_s, LabelDistribution.uniform(pi_s.num_classes), pi_s.reversed())
    return list(zip(BRANCHES, dists, (float(t) for t in taus)))


def _check_frozen(model: Classifier):
    if model.stage != "adapter_train" or model.params.trainable_names():
        raise StageError(
            f"adapter training needs a frozen model (stage adapter_train), got stage {model.stage!r} "
            f"with trainable {model.params.trainable_names()}"
        )


def branch_losses(
    adapter: LabelShiftAdapter,
    model: Classifier,
    features: np.ndarray,
    labels: np.ndarray,
    pi_s: LabelDistribution,
    taus: Tuple[float, float, float],
) -> Dict[str, float]:
    """Generalized logit-adjusted loss of each conditioning branch over the given features."""
    h = gc.constant(features)
    losses = {}
    for name, dist, tau in conditioning_targets(pi_s, taus):
        logits = forward_head(h, model.params, adapter.condition(dist).detached())
        losses[name] = generalized_logit_adjusted(logits, labels, pi_s, tau).item()
    return losses


def train_adapter(
    adapter: LabelShiftAdapter,
    model: Classifier,
    x: np.ndarray,
    y: np.ndarray,
    pi_s: LabelDistribution,
    schedule: Optional[AdapterSchedule] = None,
) -> AdapterTrainingReport:
    """
    Fit the adapter on the source set while the classifier stays frozen.

    Each iteration draws a minibatch and one of (pi_s, tau_s), (u, tau_u),
    (reversed pi_s, tau_r) uniformly, then takes one step on the adapter.

    Args:
        adapter: adapter to train in place
        model: classifier in stage adapter_train
        x, y: labeled source set
        pi_s: source label distribution
        schedule: iterations, minibatch size, optimizer settings, taus

    Returns:
        Report with the final loss of each branch on the full source set
    """
    schedule = schedule or AdapterSchedule()
    _check_frozen(model)
    if adapter.feature_dim != model.feature_dim or adapter.num_classes != model.num_classes:
        raise DimensionError(
            f"adapter ({adapter.feature_dim}, {adapter.num_classes}) does not fit model "
            f"({model.feature_dim}, {model.num_classes})"
        )
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    if n == 0:
        raise InputError("adapter training needs a non-empty source set")

    features = model.forward_features(x, norm_mode="eval_source", update_stats=False).value
    targets = conditioning_targets(pi_s, schedule.taus)
    rng = np.random.default_rng(schedule.seed)
    optimizer = SGD(adapter.params, schedule.lr, schedule.momentum, schedule.weight_decay)
    batch = min(schedule.batch_size, n)
    counts = {name: 0 for name in BRANCHES}

    for it in range(schedule.iterations):
        idx = rng.choice(n, size=batch, replace=False)
        name, dist, tau = targets[int(rng.integers(len(targets)))]
        counts[name] += 1

        try:
            logits = forward_head(gc.constant(features[idx]), model.params, adapter.condition(dist))
            loss = generalized_logit_adjusted(logits, y[idx], pi_s, tau)
        except gc.NonFiniteError as e:
            raise DivergenceError(f"adapter training diverged at iteration {it}: {e}", step=it) from e
        if not np.isfinite(loss.item()):
            raise DivergenceError(f"adapter loss became non-finite at iteration {it}", step=it, loss=loss.item())

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        if (it + 1) % 200 == 0:
            logger.info(f"  adapter iter {it + 1}/{schedule.iterations} branch={name} loss={loss.item():.4f}")

    final = branch_losses(adapter, model, features, y, pi_s, schedule.taus)
    for name, value in final.items():
        logger.info(f"  final L_gla[{name}] = {value:.4f}")
    return AdapterTrainingReport(schedule.iterations, final, counts)


def tail_mass(adapter: LabelShiftAdapter, model: Classifier, x: np.ndarray, prior: LabelDistribution) -> float:
    """Mean predicted probability on the rarer half of the classes when conditioned on `prior`."""
    h = model.forward_features(x, norm_mode="eval_source", update_stats=False)
    logits = forward_head(h, model.params, adapter.condition(prior).detached())
    tail = adapter.mapping.values > 0
    return float(gc.softmax_rows(logits.value)[:, tail].sum(axis=1).mean())
