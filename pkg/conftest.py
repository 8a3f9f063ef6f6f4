# conftest.py
"""Shared fixtures: small networks and scenarios, and a pipeline config writer."""
import numpy as np
import pytest

from services.label_shift_adapter import LabelShiftAdapter, MappingVector
from services.losses import LabelDistribution
from services.network import Classifier, NetworkSpec
from services.shift_benchmark import ShiftScenario, make_source


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    return NetworkSpec(input_dim=4, hidden_dims=(8, 6), num_classes=3)


@pytest.fixture
def small_model(small_spec):
    return Classifier(small_spec, seed=7)


@pytest.fixture
def small_scenario():
    return ShiftScenario(
        num_classes=3,
        feature_dim=4,
        rho_s=5.0,
        n_max=60,
        severity=2,
        direction="backward",
        rho_t=5.0,
        stream_length=160,
        batch_size=16,
        seed=3,
    )


@pytest.fixture
def small_pi_s(small_scenario):
    return make_source(small_scenario).pi_s


@pytest.fixture
def small_adapter(small_spec, small_pi_s):
    return LabelShiftAdapter(
        small_spec.feature_dim,
        small_spec.num_classes,
        MappingVector.from_prior(small_pi_s),
        hidden=5,
        seed=11,
    )


@pytest.fixture
def long_tailed_prior():
    counts = np.array([1000, 359, 129, 46, 17, 10], dtype=np.float64)
    return LabelDistribution.from_counts(counts)


TINY_CONFIG = """\
# tiny end-to-end pipeline
scenario.num_classes = 4
scenario.feature_dim = 6
scenario.n_max = 80
scenario.rho_s = 10
scenario.stream_length = 128
scenario.batch_size = 32
network.hidden_dims = 8, 8
pretrain.epochs = 3
pretrain.batch_size = 32
pretrain.probe_per_class = 20
adapter.hidden = 8
adapter.iterations = 20
adapter.batch_size = 32
bench.methods = source, tent, tent+adapter
bench.tau_sweep = 0:1:2
seeds = 0
"""


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return str(path)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """Output directory holding a pretrained tiny model and adapter."""
    from shiftadapt import main

    root = tmp_path_factory.mktemp("pipeline")
    config_path = root / "tiny.cfg"
    config_path.write_text(TINY_CONFIG)
    out = root / "out"
    base = ["--config", str(config_path), "--output-dir", str(out)]
    assert main(["pretrain"] + base) == 0
    assert main(["train-adapter"] + base) == 0
    return {"config": str(config_path), "out": out, "args": base}
