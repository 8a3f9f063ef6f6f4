# test_label_shift_adapter.py
"""Mapping vector, adapter forward pass, component masks and adapter training."""
import numpy as np
import pytest

import gradcore as gc
from services.errors import DimensionError, InputError, StageError
from services.label_shift_adapter import (
    ABLATION_MASKS,
    AdapterSchedule,
    LabelShiftAdapter,
    MappingVector,
    adapter_forward,
    branch_losses,
    map_distribution,
    mask_label,
    parse_components,
    tail_mass,
    train_adapter,
)
from services.losses import LabelDistribution, generalized_logit_adjusted
from services.network import Classifier, forward_head
from services.shift_benchmark import make_probe, make_source, profile_counts
from utils.accounting import adapter_params


def _assert_neutral(out, d, C):
    np.testing.assert_array_equal(out.gamma_h.value, np.ones((1, d)))
    np.testing.assert_array_equal(out.beta_h.value, np.zeros((1, d)))
    np.testing.assert_array_equal(out.delta_W.value, np.zeros((d, C)))
    np.testing.assert_array_equal(out.delta_b.value, np.zeros((1, C)))


def _randomize_final_layers(adapter, rng):
    for name in adapter.params:
        if ".fc2." in name:
            adapter.params.node(name).value[...] = rng.normal(scale=0.3, size=adapter.params.value(name).shape)


# ============================================================
# Mapping vector
# ============================================================

def test_mapping_vector_ranks_rarest_highest(long_tailed_prior):
    m = MappingVector.from_prior(long_tailed_prior)
    np.testing.assert_allclose(m.values, [-1.0, -0.6, -0.2, 0.2, 0.6, 1.0])
    assert np.all(np.diff(m.values) > 0)


def test_mapping_vector_follows_rank_not_index():
    m = MappingVector.from_prior(LabelDistribution.from_counts([10, 50, 30]))
    np.testing.assert_array_equal(m.values, [1.0, -1.0, 0.0])


@pytest.mark.parametrize("C", [2, 3, 7, 10, 100])
def test_uniform_maps_to_exactly_zero(C, rng):
    prior = LabelDistribution.from_counts(rng.integers(1, 100, size=C))
    m = MappingVector.from_prior(prior)
    assert map_distribution(m, LabelDistribution.uniform(C)) == 0.0


def test_reversal_is_antisymmetric():
    pi_s = LabelDistribution.from_counts([100, 40, 12, 1])
    m = MappingVector.from_prior(pi_s)
    assert map_distribution(m, pi_s.reversed()) == pytest.approx(-map_distribution(m, pi_s), abs=1e-15)


def test_long_tailed_source_maps_negative():
    pi_s = LabelDistribution.from_counts(profile_counts(10, 1000, 100.0))
    assert map_distribution(MappingVector.from_prior(pi_s), pi_s) < 0


def test_map_distribution_shape_mismatch():
    with pytest.raises(DimensionError):
        map_distribution(MappingVector(np.array([-1.0, 1.0])), LabelDistribution.uniform(3))


# ============================================================
# Forward pass
# ============================================================

def test_zero_final_layers_give_neutral_output(small_adapter):
    for s in (-0.7, 0.0, 0.9):
        _assert_neutral(adapter_forward(small_adapter, s), 6, 3)


def test_forward_is_deterministic(small_adapter, rng):
    _randomize_final_layers(small_adapter, rng)
    a, b = small_adapter.forward(0.3), small_adapter.forward(0.3)
    for name in ("gamma_h", "beta_h", "delta_W", "delta_b"):
        np.testing.assert_array_equal(getattr(a, name).value, getattr(b, name).value)


def test_output_slices_cover_branch_outputs(small_adapter, rng):
    _randomize_final_layers(small_adapter, rng)
    out = small_adapter.forward(0.5)
    raw_b = small_adapter._branch("branch_b", gc.constant([[0.5]])).value
    np.testing.assert_array_equal(out.delta_W.value, raw_b[:, :18].reshape(6, 3))
    np.testing.assert_array_equal(out.delta_b.value, raw_b[:, 18:])
    raw_a = small_adapter._branch("branch_a", gc.constant([[0.5]])).value
    np.testing.assert_array_equal(out.gamma_h.value, 1.0 + raw_a[:, :6])
    np.testing.assert_array_equal(out.beta_h.value, raw_a[:, 6:])


def test_gla_gradient_through_adapter(small_adapter, small_model, small_pi_s, rng):
    """Finite differences on every adapter parameter through the adapted head."""
    _randomize_final_layers(small_adapter, rng)
    h = gc.constant(np.abs(rng.normal(size=(5, 6))))
    labels = np.array([0, 1, 2, 2, 0])
    names = list(small_adapter.params)
    inputs = [small_adapter.params.node(n) for n in names]

    def fn(*_):
        out = small_adapter.forward(0.35)
        return generalized_logit_adjusted(forward_head(h, small_model.params, out), labels, small_pi_s, 2.0)

    assert gc.check_gradients(fn, inputs) <= 1e-4


def test_parameter_count_matches_closed_form(small_adapter):
    assert small_adapter.num_parameters() == adapter_params(5, 6, 3)
    big = LabelShiftAdapter(64, 10, MappingVector(np.linspace(-1, 1, 10)), hidden=100)
    assert big.num_parameters() == 2 * 100 + 100 * 128 + 128 + 2 * 100 + 100 * 650 + 650


# ============================================================
# Component masks
# ============================================================

def test_masked_components_are_neutral(small_adapter, rng):
    _randomize_final_layers(small_adapter, rng)
    only_bias = small_adapter.with_components(["delta_b"])
    out = only_bias.forward(0.4)
    np.testing.assert_array_equal(out.gamma_h.value, np.ones((1, 6)))
    np.testing.assert_array_equal(out.delta_W.value, np.zeros((6, 3)))
    assert np.any(out.delta_b.value != 0)
    _assert_neutral(small_adapter.with_components([]).forward(0.4), 6, 3)


def test_component_parsing():
    assert parse_components("all") == frozenset(["gamma_h", "beta_h", "delta_W", "delta_b"])
    assert parse_components("gamma_h+beta_h") == frozenset(["gamma_h", "beta_h"])
    assert parse_components("delta_W, delta_b") == frozenset(["delta_W", "delta_b"])
    with pytest.raises(InputError):
        parse_components("delta_x")
    assert [mask_label(m) for m in ABLATION_MASKS] == [
        "gamma_h", "beta_h", "delta_W", "delta_b", "gamma_h+beta_h", "delta_W+delta_b", "all",
    ]


def test_entries_round_trip(small_adapter, rng):
    _randomize_final_layers(small_adapter, rng)
    masked = small_adapter.with_components(["beta_h", "delta_W"])
    restored = LabelShiftAdapter.from_entries(masked.entries())
    assert restored.components == masked.components
    assert restored.params.digest() == masked.params.digest()
    np.testing.assert_array_equal(restored.mapping.values, masked.mapping.values)
    np.testing.assert_array_equal(restored.forward(-0.2).delta_W.value, masked.forward(-0.2).delta_W.value)


# ============================================================
# Training
# ============================================================

def _frozen(small_model):
    small_model.set_stage("adapter_train")
    return small_model


def test_training_requires_frozen_model(small_adapter, small_model, small_pi_s, rng):
    small_model.set_stage("pretrain")
    with pytest.raises(StageError):
        train_adapter(small_adapter, small_model, rng.normal(size=(10, 4)), np.zeros(10, dtype=int), small_pi_s)


def test_zero_iterations_leave_adapter_neutral(small_adapter, small_model, small_pi_s, rng):
    before = small_adapter.params.digest()
    report = train_adapter(
        small_adapter, _frozen(small_model), rng.normal(size=(10, 4)), rng.integers(0, 3, size=10),
        small_pi_s, AdapterSchedule(iterations=0),
    )
    assert small_adapter.params.digest() == before
    assert report.iterations == 0 and set(report.final_losses) == {"source", "uniform", "reversed"}
    _assert_neutral(small_adapter.forward(0.5), 6, 3)


def test_training_keeps_model_frozen_and_lowers_loss(small_adapter, small_model, small_scenario):
    source = make_source(small_scenario)
    model = _frozen(small_model)
    digest = model.params.digest()
    features = model.forward_features(source.x, norm_mode="eval_source", update_stats=False).value
    taus = (0.0, 1.0, 2.0)
    before = branch_losses(small_adapter, model, features, source.y, source.pi_s, taus)

    report = train_adapter(
        small_adapter, model, source.x, source.y, source.pi_s,
        AdapterSchedule(iterations=150, batch_size=32, lr=0.05, seed=2),
    )
    assert model.params.digest() == digest
    assert sum(report.branch_counts.values()) == 150
    assert sum(report.final_losses.values()) < sum(before.values())


def test_training_is_deterministic(small_spec, small_pi_s, small_scenario):
    source = make_source(small_scenario)
    digests = []
    for _ in range(2):
        model = Classifier(small_spec, seed=7)
        model.set_stage("adapter_train")
        adapter = LabelShiftAdapter(6, 3, MappingVector.from_prior(small_pi_s), hidden=5, seed=11)
        train_adapter(adapter, model, source.x, source.y, source.pi_s, AdapterSchedule(iterations=30, batch_size=16))
        digests.append(adapter.params.digest())
    assert digests[0] == digests[1]


def test_training_rejects_mismatched_adapter(small_model, small_pi_s, rng):
    adapter = LabelShiftAdapter(5, 3, MappingVector.from_prior(small_pi_s), hidden=4)
    with pytest.raises(DimensionError):
        train_adapter(adapter, _frozen(small_model), rng.normal(size=(4, 4)), np.zeros(4, dtype=int), small_pi_s)


@pytest.mark.slow
def test_reversed_conditioning_shifts_the_class_bias_to_the_tail():
    """Adapter fit on held-out source data learns a prior shift, not a sharper head."""
    from scripts.pretrain import SourceModelTrainer
    from utils.run_config import RunConfig

    config = RunConfig()
    config.pretrain.epochs = 25
    trainer = SourceModelTrainer(config)
    trainer.train()
    model = trainer.model
    model.set_stage("adapter_train")
    scenario = config.shift_scenario()
    pi_s = trainer.source.pi_s
    holdout = make_source(scenario, holdout=True)
    adapter = LabelShiftAdapter(64, 10, MappingVector.from_prior(pi_s), hidden=100)
    report = train_adapter(adapter, model, holdout.x, holdout.y, pi_s, AdapterSchedule(iterations=600))
    assert report.final_losses["reversed"] > 0.01

    x_probe, _ = make_probe(scenario, 100)
    assert tail_mass(adapter, model, x_probe, pi_s.reversed()) > tail_mass(adapter, model, x_probe, pi_s)

    # tail-minus-head class bias over {m.pi_s, 0, m.reversed}
    m = adapter.mapping
    tail, head = m.values > 0, m.values < 0
    gaps = []
    for s in (map_distribution(m, pi_s), 0.0, map_distribution(m, pi_s.reversed())):
        db = adapter.forward(s).delta_b.value.reshape(-1)
        gaps.append(db[tail].mean() - db[head].mean())
    assert gaps[0] <= gaps[1] <= gaps[2]
    assert gaps[0] < 0 < gaps[2]
