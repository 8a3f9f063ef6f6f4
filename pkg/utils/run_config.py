# utils/run_config.py
"""
Run configuration: a tree of dataclasses with flat dotted-key overrides.

Precedence, lowest first: field defaults, environment (.env is loaded),
config file, command-line overrides.

Config file format:
    # comment
    tta.lr = 0.001
    bench.methods = source, tent, tent+adapter
"""
import dataclasses
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from dotenv import load_dotenv

from services.errors import ConfigError
from services.label_shift_adapter import AdapterSchedule, parse_components
from services.network import NetworkSpec
from services.shift_benchmark import ShiftScenario
from services.tta_engine import TtaConfig

PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
load_dotenv(os.path.join(PROJECT_ROOT, ".env"))

DEFAULT_OUTPUT_DIR = "runs"


@dataclass
class ScenarioSection:
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


@dataclass
class NetworkSection:
    hidden_dims: Tuple[int, ...] = (64, 64)
    alpha_shrink: float = 4.0
    m_iabn: float = 0.01
    init_seed: int = 0


@dataclass
class PretrainSection:
    epochs: int = 40
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # balanced_softmax | cross_entropy | gla
    loss: str = "balanced_softmax"
    # used when loss = gla
    tau: float = 1.0
    probe_per_class: int = 200


@dataclass
class AdapterSection:
    hidden: int = 100
    iterations: int = 1000
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    taus: Tuple[float, ...] = (0.0, 1.0, 2.0)
    components: str = "all"
    # holdout: a fresh long-tailed source sample; source: the pretraining samples
    data: str = "holdout"
    seed: int = 0


@dataclass
class TtaSection:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    alpha: float = 0.1
    # 0 disables top-k filtering
    top_k: int = 0
    freeze_top: int = 1
    reforward: bool = False
    oracle_prior: bool = False
    trajectory: bool = False


@dataclass
class BenchSection:
    methods: Tuple[str, ...] = ("source", "bn_stats", "tent", "tent+adapter", "iabn", "iabn+adapter")
    workers: int = 1
    # tau triples for the tau ablation, colon separated inside a triple
    tau_sweep: Tuple[str, ...] = ("0:1:2", "1:-1.5:3", "0:0.5:1.5")


@dataclass
class RunConfig:
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    adapter: AdapterSection = field(default_factory=AdapterSection)
    tta: TtaSection = field(default_factory=TtaSection)
    bench: BenchSection = field(default_factory=BenchSection)
    seeds: Tuple[int, ...] = (0, 1, 2)
    output_dir: str = DEFAULT_OUTPUT_DIR

    def shift_scenario(self) -> ShiftScenario:
        return ShiftScenario(**dataclasses.asdict(self.scenario))

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(
            input_dim=self.scenario.feature_dim,
            hidden_dims=tuple(self.network.hidden_dims),
            num_classes=self.scenario.num_classes,
        )

    def adapter_schedule(self, taus: Optional[Sequence[float]] = None) -> AdapterSchedule:
        a = self.adapter
        return AdapterSchedule(
            iterations=a.iterations,
            batch_size=a.batch_size,
            lr=a.lr,
            momentum=a.momentum,
            weight_decay=a.weight_decay,
            taus=tuple(taus if taus is not None else a.taus),
            seed=a.seed,
        )

    def tta_config(self, oracle_prior: Optional[bool] = None) -> TtaConfig:
        t = self.tta
        return TtaConfig(
            lr=t.lr,
            momentum=t.momentum,
            weight_decay=t.weight_decay,
            alpha=t.alpha,
            top_k=t.top_k or None,
            freeze_top=t.freeze_top,
            reforward=t.reforward,
            oracle_prior=t.oracle_prior if oracle_prior is None else oracle_prior,
        )

    def tau_triples(self) -> List[Tuple[float, float, float]]:
        triples = []
        for text in self.bench.tau_sweep:
            parts = text.split(":")
            if len(parts) != 3:
                raise ConfigError(f"bench.tau_sweep entry {text!r} must be three colon-separated values")
            try:
                triples.append(tuple(float(p) for p in parts))
            except ValueError as e:
                raise ConfigError(f"bench.tau_sweep entry {text!r}: {e}") from e
        return triples


def _parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _coerce(raw: str, template):
    """Parse raw text to the type of the field's default value."""
    if isinstance(template, bool):
        return _parse_bool(raw)
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    if isinstance(template, tuple):
        elem = type(template[0]) if template else str
        items = [item.strip() for item in raw.split(",") if item.strip()]
        return tuple(_coerce(item, elem()) for item in items)
    return raw.strip()


def _render(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def flatten(config: RunConfig) -> Dict[str, object]:
    """Dotted key -> value for every leaf field."""
    out = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if dataclasses.is_dataclass(value):
            for sub in dataclasses.fields(value):
                out[f"{f.name}.{sub.name}"] = getattr(value, sub.name)
        else:
            out[f.name] = value
    return out


def resolved(config: RunConfig) -> Dict[str, str]:
    """Flat sorted rendering echoed into manifests."""
    return {key: _render(value) for key, value in sorted(flatten(config).items())}


def set_value(config: RunConfig, key: str, raw: str):
    """
    Assign one dotted key from its text form.

    Raises:
        ConfigError: unknown key or unparsable value
    """
    parts = key.strip().split(".")
    target = config
    for part in parts[:-1]:
        sub = getattr(target, part, None)
        if not dataclasses.is_dataclass(sub):
            raise ConfigError(f"unknown config key {key!r}")
        target = sub
    name = parts[-1]
    if name not in {f.name for f in dataclasses.fields(target)} or dataclasses.is_dataclass(getattr(target, name)):
        raise ConfigError(f"unknown config key {key!r}")
    try:
        value = _coerce(raw, getattr(target, name))
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {e}") from e
    setattr(target, name, value)


def parse_config_text(text: str) -> List[Tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def parse_overrides(args: Sequence[str]) -> List[Tuple[str, str]]:
    """['--tta.lr', '0.01', '--seeds=0,1'] -> [('tta.lr', '0.01'), ('seeds', '0,1')]"""
    pairs = []
    i = 0
    while i < len(args):
        arg = args[i]
        if not arg.startswith("--"):
            raise ConfigError(f"unexpected argument {arg!r}; overrides look like --section.key value")
        key = arg[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"override {arg} has no value")
            value = args[i + 1]
            i += 2
        pairs.append((key, value))
    return pairs


def dump_config(config: RunConfig) -> str:
    return "".join(f"{key} = {value}\n" for key, value in resolved(config).items())


def _validate(config: RunConfig):
    try:
        config.shift_scenario()
        config.network_spec()
        parse_components(config.adapter.components)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if config.pretrain.loss not in ("balanced_softmax", "cross_entropy", "gla"):
        raise ConfigError(f"pretrain.loss must be balanced_softmax, cross_entropy or gla, got {config.pretrain.loss!r}")
    if len(config.adapter.taus) != 3:
        raise ConfigError(f"adapter.taus needs three values, got {config.adapter.taus}")
    if config.adapter.data not in ("holdout", "source"):
        raise ConfigError(f"adapter.data must be holdout or source, got {config.adapter.data!r}")
    if not config.seeds:
        raise ConfigError("seeds must not be empty")
    config.tau_triples()


def load_config(path: Optional[str] = None, overrides: Iterable[Tuple[str, str]] = ()) -> RunConfig:
    """Build a RunConfig from defaults, environment, an optional file and overrides."""
    config = RunConfig()
    env_output = os.getenv("SHIFTADAPT_OUTPUT_DIR")
    if env_output:
        config.output_dir = env_output
    env_workers = os.getenv("SHIFTADAPT_WORKERS")
    if env_workers:
        set_value(config, "bench.workers", env_workers)

    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as f:
            for key, value in parse_config_text(f.read()):
                set_value(config, key, value)
    for key, value in overrides:
        set_value(config, key, value)
    _validate(config)
    return config
