# services/shift_benchmark.py
"""
Synthetic benchmark with joint covariate and label shift.

Source data are class-conditional Gaussians with an exponentially
long-tailed class profile. Target streams redraw labels from a forward,
uniform or backward profile and pass features through a severity-graded
covariate shift (rotation, additive noise, per-dimension scaling).

Class geometry and the shift transform depend only on `geometry_seed`, so
streams drawn with different sampling seeds share one world and one model.
"""
import logging
from dataclasses import dataclass, replace
from typing import Iterator, List, Optional, Tuple

import numpy as np

from .errors import InfeasibleScenarioError, InputError
from .losses import LabelDistribution

logger = logging.getLogger(__name__)

DIRECTIONS = ("forward", "uniform", "backward")
MAX_SEVERITY = 5
MAX_ROTATION_DEG = 25.0
MAX_NOISE = 1.5
MAX_SCALE_JITTER = 0.3

# (direction, rho_t) of the seven report columns, in column order
TEST_COLUMNS: Tuple[Tuple[str, float], ...] = (
    ("forward", 50.0),
    ("forward", 25.0),
    ("forward", 10.0),
    ("uniform", 1.0),
    ("backward", 10.0),
    ("backward", 25.0),
    ("backward", 50.0),
)


def column_label(direction: str, rho_t: float) -> str:
    """F50 / U / B10 style column name."""
    if direction == "uniform":
        return "U"
    return f"{direction[0].upper()}{rho_t:g}"


COLUMN_LABELS = tuple(column_label(d, r) for d, r in TEST_COLUMNS)


@dataclass(frozen=True)
class ShiftScenario:
    """Everything needed to regenerate a source set and a target stream."""

    num_classes: int = 10
    feature_dim: int = 16
    rho_s: float = 100.0
    n_max: int = 1000
    mean_scale: float = 3.5
    within_std: float = 1.0
    severity: int = 3
    direction: str = "backward"
    rho_t: float = 50.0
    stream_length: int = 6400
    batch_size: int = 64
    seed: int = 0
    geometry_seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise InputError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.feature_dim < 2:
            raise InputError(f"feature_dim must be >= 2, got {self.feature_dim}")
        if self.rho_s < 1 or self.rho_t < 1:
            raise InputError(f"imbalance ratios must be >= 1, got rho_s={self.rho_s}, rho_t={self.rho_t}")
        if self.severity not in range(MAX_SEVERITY + 1):
            raise InputError(f"severity must be in 0..{MAX_SEVERITY}, got {self.severity}")
        if self.direction not in DIRECTIONS:
            raise InputError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.stream_length < 0 or self.batch_size < 1 or self.n_max < 1:
            raise InputError("stream_length must be >= 0, batch_size and n_max >= 1")

    def with_target(self, direction: str, rho_t: float, seed: Optional[int] = None) -> "ShiftScenario":
        return replace(self, direction=direction, rho_t=rho_t, seed=self.seed if seed is None else seed)

    @property
    def label(self) -> str:
        return column_label(self.direction, self.rho_t)


@dataclass
class SourceSet:
    x: np.ndarray
    y: np.ndarray
    counts: np.ndarray
    pi_s: LabelDistribution


@dataclass
class TargetStream:
    """Unlabeled test stream; `y` is kept only for scoring."""

    x: np.ndarray
    y: np.ndarray
    prior: LabelDistribution
    batch_size: int

    def __len__(self) -> int:
        return len(self.y)

    def batch_bounds(self) -> List[Tuple[int, int]]:
        """Consecutive batches; a trailing single sample is folded into the previous batch."""
        n, b = len(self.y), self.batch_size
        bounds = [(start, min(start + b, n)) for start in range(0, n, b)]
        if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] < 2:
            last = bounds.pop()
            bounds[-1] = (bounds[-1][0], last[1])
        return bounds

    def batches(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        for start, stop in self.batch_bounds():
            yield self.x[start:stop], self.y[start:stop]


def _round_half_up(values: np.ndarray) -> np.ndarray:
    return np.floor(values + 0.5).astype(np.int64)


def profile_counts(num_classes: int, n_max: int, rho: float) -> np.ndarray:
    """
    Exponential long-tailed counts n_i = round(n_max * rho^(-i / (C - 1))).

    Raises:
        InfeasibleScenarioError: some class would get fewer than one sample
    """
    i = np.arange(num_classes)
    counts = _round_half_up(n_max * float(rho) ** (-i / (num_classes - 1)))
    short = np.flatnonzero(counts < 1)
    if short.size:
        raise InfeasibleScenarioError(
            f"class {int(short[0])} would get {int(counts[short[0]])} samples "
            f"(n_max={n_max}, rho={rho}); raise n_max or lower rho"
        )
    return counts


def checked_profile_counts(num_classes: int, n_max: int, rho: float, tolerance: float = 0.05) -> np.ndarray:
    """
    profile_counts, with the realized max/min ratio held to `tolerance` of rho.

    Rounding the rarest class moves the ratio away from rho; small moves are
    logged, larger ones make the scenario unusable.

    Raises:
        InfeasibleScenarioError: realized ratio is off by more than `tolerance`
    """
    counts = profile_counts(num_classes, n_max, rho)
    realized = counts.max() / counts.min()
    deviation = abs(realized - rho) / rho
    if deviation > tolerance:
        raise InfeasibleScenarioError(
            f"class {num_classes - 1} gets {int(counts.min())} samples, so max/min = {realized:.2f} "
            f"instead of rho={rho:g} ({deviation:.1%} off); raise n_max"
        )
    if deviation > 0:
        logger.warning(f"Class counts clipped by rounding: max/min = {realized:.3f}, rho = {rho:g}")
    return counts


def _rng(scenario: ShiftScenario, stream: int) -> np.random.Generator:
    return np.random.default_rng([scenario.seed, stream])


class _Geometry:
    """Class means and covariate-shift transform, drawn from geometry_seed."""

    def __init__(self, scenario: ShiftScenario):
        rng = np.random.default_rng([scenario.geometry_seed, 99])
        C, D = scenario.num_classes, scenario.feature_dim
        raw = rng.normal(size=(D, C))
        if C <= D:
            q, _ = np.linalg.qr(raw)
            directions = q.T
        else:
            directions = raw.T / np.linalg.norm(raw.T, axis=1, keepdims=True)
        self.means = scenario.mean_scale * directions

        # one rotation plane and one scaling pattern; severity only sets magnitudes
        basis, _ = np.linalg.qr(rng.normal(size=(D, D)))
        self.basis = basis
        self.jitter = rng.uniform(-1.0, 1.0, size=D)

        s = scenario.severity / MAX_SEVERITY
        theta = np.deg2rad(MAX_ROTATION_DEG * s)
        givens = np.eye(D)
        givens[0, 0] = givens[1, 1] = np.cos(theta)
        givens[0, 1] = -np.sin(theta)
        givens[1, 0] = np.sin(theta)
        self.rotation = basis @ givens @ basis.T if scenario.severity else np.eye(D)
        self.noise_std = MAX_NOISE * scenario.within_std * s
        self.scale = 1.0 + self.jitter * MAX_SCALE_JITTER * s
        self.within_std = scenario.within_std
        self.shifted = scenario.severity > 0

    def sample(self, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        noise = rng.normal(size=(labels.size, self.means.shape[1]))
        return self.means[labels] + self.within_std * noise

    def shift(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Rotate, add noise, then scale each dimension. Labels are untouched."""
        if not self.shifted:
            return x
        out = x @ self.rotation.T
        out = out + self.noise_std * rng.normal(size=x.shape)
        return out * self.scale

    def shifted_means(self) -> np.ndarray:
        return (self.means @ self.rotation.T) * self.scale

    def shifted_std(self) -> np.ndarray:
        total = np.sqrt(self.within_std ** 2 + self.noise_std ** 2)
        return total * self.scale


def make_source(scenario: ShiftScenario, holdout: bool = False) -> SourceSet:
    """
    Long-tailed labeled training set and its empirical prior.

    Args:
        scenario: source fields (num_classes, rho_s, n_max) and seed are used
        holdout: draw an independent sample with the same class counts,
            for fitting things on data the pretrained model has not seen

    Returns:
        SourceSet with shuffled samples, per-class counts and pi_s
    """
    counts = checked_profile_counts(scenario.num_classes, scenario.n_max, scenario.rho_s)
    rng = _rng(scenario, 3 if holdout else 0)
    labels = rng.permutation(np.repeat(np.arange(scenario.num_classes), counts))
    x = _Geometry(scenario).sample(labels, rng)
    logger.debug(f"Source counts: {counts.tolist()}")
    return SourceSet(x, labels, counts, LabelDistribution.from_counts(counts))


def target_prior(scenario: ShiftScenario) -> LabelDistribution:
    """Same exponential profile with ratio rho_t: source order, uniform, or reversed."""
    C = scenario.num_classes
    if scenario.direction == "uniform":
        return LabelDistribution.uniform(C)
    prior = LabelDistribution.from_counts(profile_counts(C, scenario.n_max, scenario.rho_t))
    return prior if scenario.direction == "forward" else prior.reversed()


def allocate(prior: LabelDistribution, total: int) -> np.ndarray:
    """Integer class counts summing to total, by largest remainder (ties to the lower index)."""
    exact = prior.probs * total
    counts = np.floor(exact).astype(np.int64)
    remainder = total - int(counts.sum())
    if remainder:
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:remainder]] += 1
    return counts


def make_target_stream(scenario: ShiftScenario, pi_s: Optional[LabelDistribution] = None) -> TargetStream:
    """
    Unlabeled, covariate-shifted test stream under the scenario's target prior.

    pi_s is accepted for callers that build the target relative to a realized
    source prior; the class order of the profile already matches it.
    """
    prior = target_prior(scenario)
    if pi_s is not None and pi_s.num_classes != prior.num_classes:
        raise InputError(f"pi_s has {pi_s.num_classes} classes, scenario has {prior.num_classes}")
    rng = _rng(scenario, 1)
    counts = allocate(prior, scenario.stream_length)
    labels = rng.permutation(np.repeat(np.arange(scenario.num_classes), counts))
    geometry = _Geometry(scenario)
    x = geometry.shift(geometry.sample(labels, rng), rng)
    return TargetStream(x, labels, prior, scenario.batch_size)


def make_probe(scenario: ShiftScenario, n_per_class: int = 200, shifted: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Balanced held-out set, in the source domain unless `shifted`."""
    rng = _rng(scenario, 2)
    labels = rng.permutation(np.repeat(np.arange(scenario.num_classes), n_per_class))
    geometry = _Geometry(scenario)
    x = geometry.sample(labels, rng)
    if shifted:
        x = geometry.shift(x, rng)
    return x, labels


def oracle_posterior(
    x: np.ndarray,
    scenario: ShiftScenario,
    prior: Optional[LabelDistribution] = None,
    shifted: bool = True,
) -> np.ndarray:
    """
    Bayes posterior p(y | x) under the known generator.

    Args:
        x: n x D samples
        scenario: generator parameters
        prior: class prior; defaults to the scenario's target prior
        shifted: whether x went through the covariate shift

    Returns:
        n x C rows of posterior probabilities
    """
    geometry = _Geometry(scenario)
    prior = prior or target_prior(scenario)
    if shifted and geometry.shifted:
        means, std = geometry.shifted_means(), geometry.shifted_std()
    else:
        means, std = geometry.means, np.full(scenario.feature_dim, geometry.within_std)
    z = np.asarray(x, dtype=np.float64)[:, None, :] - means[None, :, :]
    log_lik = -0.5 * np.sum((z / std) ** 2, axis=2)
    scores = log_lik + prior.log()[None, :]
    scores -= scores.max(axis=1, keepdims=True)
    p = np.exp(scores)
    return p / p.sum(axis=1, keepdims=True)


def oracle_accuracy(scenario: ShiftScenario, n_per_class: int = 500) -> float:
    """Balanced Bayes accuracy of the oracle on the (shifted) probe."""
    x, y = make_probe(scenario, n_per_class, shifted=True)
    uniform = LabelDistribution.uniform(scenario.num_classes)
    pred = oracle_posterior(x, scenario, uniform).argmax(axis=1)
    return float(np.mean(pred == y))
