# test_prior_estimator.py
"""EMA estimate of the target label distribution."""
import numpy as np
import pytest

from services.errors import DimensionError, InputError
from services.prior_estimator import PriorEstimate, default_top_k, keep_top_k
from services.shift_benchmark import ShiftScenario, make_target_stream, oracle_posterior


def test_starts_uniform():
    est = PriorEstimate.initial(4)
    np.testing.assert_array_equal(est.y_hat.probs, np.full(4, 0.25))
    assert est.step == 0


def test_single_update_two_classes():
    est = PriorEstimate.initial(2, alpha=0.1).update(np.array([[1.0, 0.0], [1.0, 0.0]]))
    np.testing.assert_allclose(est.y_hat.probs, [0.55, 0.45], atol=1e-15)
    assert est.step == 1


def test_update_returns_new_estimate():
    est = PriorEstimate.initial(3)
    updated = est.update(np.array([[0.2, 0.3, 0.5]]))
    assert est.step == 0 and updated.step == 1
    np.testing.assert_array_equal(est.y_hat.probs, np.full(3, 1 / 3))


def test_alpha_zero_never_moves(rng):
    est = PriorEstimate.initial(5, alpha=0.0)
    for _ in range(20):
        est = est.update(rng.dirichlet(np.ones(5), size=8))
    np.testing.assert_array_equal(est.y_hat.probs, np.full(5, 0.2))
    assert est.step == 20


def test_batch_equal_to_estimate_is_fixed_point(rng):
    est = PriorEstimate.initial(3, alpha=0.3)
    est = est.update(rng.dirichlet(np.ones(3), size=4))
    before = est.y_hat.probs.copy()
    after = est.update(before.reshape(1, -1)).y_hat.probs
    np.testing.assert_array_equal(after, before)


def test_old_batches_decay_geometrically():
    """A single batch's contribution shrinks by (1 - alpha) per later step."""
    alpha = 0.2
    est = PriorEstimate.initial(2, alpha=alpha).update(np.array([[1.0, 0.0]]))
    gap0 = est.y_hat.probs[0] - 0.5
    for k in range(1, 6):
        est = est.update(np.array([[0.5, 0.5]]))
        assert est.y_hat.probs[0] - 0.5 == pytest.approx(gap0 * (1 - alpha) ** k, rel=1e-12)


def test_reset_is_idempotent(rng):
    est = PriorEstimate.initial(4, alpha=0.5, top_k=2)
    for _ in range(3):
        est = est.update(rng.dirichlet(np.ones(4), size=6))
    once = est.reset()
    twice = once.reset()
    assert once.step == twice.step == 0
    np.testing.assert_array_equal(once.y_hat.probs, twice.y_hat.probs)
    np.testing.assert_array_equal(once.y_hat.probs, np.full(4, 0.25))
    assert once.alpha == 0.5 and once.top_k == 2


def test_estimate_stays_a_distribution(rng):
    est = PriorEstimate.initial(6, alpha=0.7)
    for _ in range(50):
        est = est.update(rng.dirichlet(np.full(6, 0.3), size=int(rng.integers(1, 20))))
        assert est.y_hat.probs.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(est.y_hat.probs >= 0)


def test_keep_top_k():
    probs = np.array([[0.1, 0.4, 0.2, 0.3], [0.25, 0.25, 0.25, 0.25]])
    kept = keep_top_k(probs, 2)
    np.testing.assert_allclose(kept[0], [0.0, 4 / 7, 0.0, 3 / 7])
    # ties keep the lowest indices
    np.testing.assert_allclose(kept[1], [0.5, 0.5, 0.0, 0.0])
    assert keep_top_k(probs, 4) is probs
    with pytest.raises(InputError):
        keep_top_k(probs, 0)


def test_top_k_filters_before_averaging():
    est = PriorEstimate.initial(3, alpha=1.0, top_k=1).update(np.array([[0.5, 0.3, 0.2], [0.1, 0.6, 0.3]]))
    np.testing.assert_allclose(est.y_hat.probs, [0.5, 0.5, 0.0])


def test_default_top_k():
    assert default_top_k(10) is None
    assert default_top_k(100) == 3


def test_update_errors():
    est = PriorEstimate.initial(3)
    with pytest.raises(InputError):
        est.update(np.zeros((0, 3)))
    with pytest.raises(InputError):
        est.update(np.array([0.2, 0.3, 0.5]))
    with pytest.raises(DimensionError):
        est.update(np.full((2, 4), 0.25))
    with pytest.raises(InputError):
        PriorEstimate.initial(3, alpha=1.5)


# ============================================================
# Tracking with oracle posteriors
# ============================================================

@pytest.mark.parametrize("direction", ["forward", "uniform", "backward"])
def test_oracle_posteriors_track_target_prior(direction):
    scenario = ShiftScenario(
        num_classes=10, feature_dim=16, direction=direction, rho_t=10.0,
        stream_length=512 * 200, batch_size=512, seed=5,
    )
    stream = make_target_stream(scenario)
    est = PriorEstimate.initial(10, alpha=0.1)
    for x, _ in stream.batches():
        est = est.update(oracle_posterior(x, scenario))
    assert est.step == 200
    assert est.y_hat.l1(stream.prior) <= 0.05


def test_oracle_tracking_follows_a_prior_switch():
    forward = ShiftScenario(direction="forward", rho_t=50.0, stream_length=512 * 60, batch_size=512, seed=1)
    backward = forward.with_target("backward", 50.0)
    est = PriorEstimate.initial(10, alpha=0.1)
    for scenario in (forward, backward):
        for x, _ in make_target_stream(scenario).batches():
            est = est.update(oracle_posterior(x, scenario))
    target = make_target_stream(backward).prior
    assert est.y_hat.l1(target) <= 0.05
    assert est.y_hat.probs[-1] > est.y_hat.probs[0]
