# test_tta_engine.py
"""Method registry, single adaptation steps and full-stream runs."""
from dataclasses import replace

import numpy as np
import pytest

import gradcore as gc
from services import tta_engine
from services.errors import DivergenceError, InputError, StageError
from services.losses import LabelDistribution
from services.tta_engine import (
    METHODS,
    TtaConfig,
    get_method,
    init_state,
    run_stream,
    stream_metrics,
    tta_step,
)


def _tta_model(model, freeze_top=1):
    model.set_stage("tta", freeze_top=freeze_top)
    return model


# ============================================================
# Registry
# ============================================================

def test_registry_entries():
    assert get_method("source").loss == "none"
    assert get_method("tent").norm_mode == "eval_batch"
    assert get_method("iabn+adapter").adapter and get_method("iabn+adapter").tracks_prior
    assert get_method("logit_adjust").posthoc
    assert not get_method("tent").tracks_prior
    assert {"pseudo_label+adapter", "im_loss", "bn_stats"} <= set(METHODS)
    with pytest.raises(InputError):
        get_method("mystery")


# ============================================================
# Single steps
# ============================================================

def test_source_step_matches_frozen_prediction(small_model, rng):
    model = _tta_model(small_model)
    digest = model.params.digest()
    state = init_state(model, TtaConfig())
    x = rng.normal(size=(12, 4))
    expected = model.predict_proba(x)
    estimate = state.estimate

    probs, state = tta_step(get_method("source"), model, None, state, x)
    np.testing.assert_array_equal(probs, expected)
    assert state.step == 1
    assert state.estimate is estimate
    assert model.params.digest() == digest


def test_source_is_invariant_to_row_order(small_model, rng):
    model = _tta_model(small_model)
    x = rng.normal(size=(10, 4))
    perm = rng.permutation(10)
    probs, _ = tta_step(get_method("source"), model, None, init_state(model, TtaConfig()), x)
    permuted, _ = tta_step(get_method("source"), model, None, init_state(model, TtaConfig()), x[perm])
    np.testing.assert_allclose(permuted, probs[perm], rtol=0, atol=1e-12)


def test_step_requires_tta_stage(small_model, rng):
    small_model.set_stage("pretrain")
    state = init_state(small_model, TtaConfig())
    with pytest.raises(StageError):
        tta_step(get_method("tent"), small_model, None, state, rng.normal(size=(4, 4)))


def test_adapter_method_requires_adapter(small_model, rng):
    model = _tta_model(small_model)
    with pytest.raises(InputError):
        tta_step(get_method("tent+adapter"), model, None, init_state(model, TtaConfig()), rng.normal(size=(4, 4)))


def test_non_finite_loss_raises(small_model, rng, monkeypatch):
    monkeypatch.setitem(tta_engine.LOSSES, "entropy", lambda logits: gc.Node(np.array([[np.nan]])))
    model = _tta_model(small_model)
    state = init_state(model, TtaConfig())
    with pytest.raises(DivergenceError) as info:
        tta_step(get_method("tent"), model, None, state, rng.normal(size=(6, 4)))
    assert info.value.step == 0


def test_tracking_methods_update_the_estimate(small_model, small_adapter, rng):
    model = _tta_model(small_model)
    state = init_state(model, TtaConfig(alpha=0.5))
    probs, state = tta_step(get_method("iabn+adapter"), model, small_adapter, state, rng.normal(size=(8, 4)))
    expected = 0.5 * (np.full(3, 1 / 3) + probs.mean(axis=0))
    np.testing.assert_allclose(state.estimate.y_hat.probs, expected, atol=1e-15)
    assert state.estimate.step == 1


def test_posthoc_step_with_uniform_priors_matches_iabn(small_model, rng):
    """At step 0 the estimate and the logit prior are both uniform, so the correction vanishes."""
    x = rng.normal(size=(8, 4))
    a = _tta_model(small_model.copy())
    b = _tta_model(small_model.copy())
    probs_iabn, _ = tta_step(get_method("iabn"), a, None, init_state(a, TtaConfig()), x)
    probs_la, _ = tta_step(get_method("logit_adjust"), b, None, init_state(b, TtaConfig()), x)
    np.testing.assert_array_equal(probs_la, probs_iabn)


def test_reforward_scores_updated_model(small_model, rng):
    x = rng.normal(size=(8, 4))
    a = _tta_model(small_model.copy())
    b = _tta_model(small_model.copy())
    config = TtaConfig(lr=0.5)
    pre, _ = tta_step(get_method("tent"), a, None, init_state(a, config), x, reforward=False)
    post, _ = tta_step(get_method("tent"), b, None, init_state(b, config), x, reforward=True)
    assert not np.array_equal(pre, post)
    np.testing.assert_array_equal(post, b.predict_proba(x, norm_mode="eval_batch"))


# ============================================================
# Stream runs
# ============================================================

def test_tent_with_zero_lr_equals_bn_stats(small_model, small_scenario):
    config = TtaConfig(lr=0.0)
    tent = run_stream(get_method("tent"), small_model, None, small_scenario, config=config)
    bn = run_stream(get_method("bn_stats"), small_model, None, small_scenario, config=config)
    assert tent.accuracy == bn.accuracy
    np.testing.assert_array_equal(tent.trajectory["batch_accuracy"], bn.trajectory["batch_accuracy"])
    assert tent.adapted_model.params.digest() == bn.adapted_model.params.digest()


def test_neutral_adapter_is_bit_identical_to_plain_tent(small_model, small_adapter, small_scenario):
    scenario = replace(small_scenario, stream_length=1600)
    config = TtaConfig(lr=0.01)
    plain = run_stream(get_method("tent"), small_model, None, scenario, config=config)
    adapted = run_stream(get_method("tent+adapter"), small_model, small_adapter, scenario, config=config)
    assert len(plain.trajectory) == 100
    np.testing.assert_array_equal(plain.trajectory["batch_accuracy"], adapted.trajectory["batch_accuracy"])
    np.testing.assert_array_equal(plain.trajectory["loss"], adapted.trajectory["loss"])
    assert plain.adapted_model.params.digest() == adapted.adapted_model.params.digest()


def test_only_unfrozen_norm_affine_params_change(small_model, small_scenario):
    result = run_stream(get_method("tent"), small_model, None, small_scenario, config=TtaConfig(lr=0.05))
    adapted = result.adapted_model.params
    moving = ["block0.norm.weight", "block0.norm.bias"]
    assert adapted.digest(exclude=moving) == small_model.params.digest(exclude=moving)
    assert adapted.digest() != small_model.params.digest()


def test_run_leaves_the_input_model_untouched(small_model, small_adapter, small_scenario):
    digest = small_model.params.digest()
    buffers = {k: v.copy() for k, v in small_model.buffers().items()}
    run_stream(get_method("iabn+adapter"), small_model, small_adapter, small_scenario, config=TtaConfig(lr=0.05))
    assert small_model.params.digest() == digest
    for name, value in small_model.buffers().items():
        np.testing.assert_array_equal(value, buffers[name])


def test_runs_are_deterministic(small_model, small_adapter, small_scenario):
    a = run_stream(get_method("iabn+adapter"), small_model, small_adapter, small_scenario, seed=4)
    b = run_stream(get_method("iabn+adapter"), small_model, small_adapter, small_scenario, seed=4)
    assert a.accuracy == b.accuracy
    np.testing.assert_array_equal(a.final_prior.probs, b.final_prior.probs)
    assert a.trajectory.equals(b.trajectory)


def test_trajectory_columns_and_prior_tracking(small_model, small_scenario):
    result = run_stream(get_method("source"), small_model, None, small_scenario)
    assert list(result.trajectory.columns) == ["t", "batch_accuracy", "loss", "prior_l1", "yhat_0", "yhat_1", "yhat_2"]
    assert result.trajectory["t"].tolist() == list(range(1, 11))
    assert result.trajectory["loss"].isna().all()
    assert result.prior_l1 == pytest.approx(result.trajectory["prior_l1"].iloc[-1])
    assert result.num_samples == 160


def test_empty_stream(small_model, small_scenario):
    empty = replace(small_scenario, stream_length=0)
    result = run_stream(get_method("tent"), small_model, None, empty)
    assert result.num_samples == 0
    assert result.accuracy is None and result.macro_accuracy is None
    assert result.trajectory.empty
    np.testing.assert_array_equal(result.final_prior.probs, np.full(3, 1 / 3))


def test_oracle_prior_feeds_true_distribution(small_model, small_adapter, small_scenario, rng):
    for name in [n for n in small_adapter.params if ".fc2." in n]:
        small_adapter.params.node(name).value[...] = rng.normal(scale=0.3, size=small_adapter.params.value(name).shape)
    estimated = run_stream(get_method("tent+adapter"), small_model, small_adapter, small_scenario)
    oracle = run_stream(
        get_method("tent+adapter"), small_model, small_adapter, small_scenario, config=TtaConfig(oracle_prior=True),
    )
    assert not estimated.trajectory["loss"].equals(oracle.trajectory["loss"])


def test_stream_metrics():
    y_true = np.array([0, 0, 1, 1, 1, 1])
    y_pred = np.array([0, 1, 1, 1, 1, 1])
    accuracy, macro, per_class = stream_metrics(y_true, y_pred, 3)
    assert accuracy == pytest.approx(5 / 6)
    # class 2 never occurs and is left out of the macro average
    assert macro == pytest.approx(0.75)
    np.testing.assert_allclose(per_class, [0.5, 1.0, 0.0])
    assert stream_metrics(np.zeros(0, dtype=int), np.zeros(0, dtype=int), 3) == (None, None, None)


def test_logit_prior_defaults_to_uniform(small_model):
    state = init_state(_tta_model(small_model), TtaConfig())
    assert isinstance(state.logit_prior, LabelDistribution)
    np.testing.assert_array_equal(state.logit_prior.probs, np.full(3, 1 / 3))


def test_overflow_inside_the_loss_raises_divergence(small_model, rng, monkeypatch):
    def exploding(logits):
        return gc.reduce_sum(gc.exp(gc.scale(gc.mul(logits, logits), 1e6)))

    monkeypatch.setitem(tta_engine.LOSSES, "entropy", exploding)
    model = _tta_model(small_model)
    with pytest.raises(DivergenceError) as info:
        tta_step(get_method("tent"), model, None, init_state(model, TtaConfig()), rng.normal(size=(6, 4)))
    assert info.value.step == 0
