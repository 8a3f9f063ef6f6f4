# test_losses.py
"""Losses, label distributions and post-hoc prior correction."""
import math

import numpy as np
import pytest

import gradcore as gc
from services.errors import DimensionError, InputError
from services.losses import (
    LabelDistribution,
    balanced_softmax,
    cross_entropy,
    entropy_loss,
    generalized_logit_adjusted,
    info_max_loss,
    posthoc_logit_adjust,
    pseudo_label_loss,
)


def _random_prior(rng, C):
    return LabelDistribution.from_counts(rng.integers(1, 1000, size=C))


# ============================================================
# LabelDistribution
# ============================================================

def test_label_distribution_validation():
    with pytest.raises(InputError):
        LabelDistribution(np.array([0.5, 0.6]))
    with pytest.raises(InputError):
        LabelDistribution(np.array([1.5, -0.5]))
    with pytest.raises(InputError):
        LabelDistribution(np.array([1.0]))
    with pytest.raises(InputError):
        LabelDistribution.from_counts([0, 0])


def test_label_distribution_helpers():
    u = LabelDistribution.uniform(4)
    np.testing.assert_array_equal(u.probs, np.full(4, 0.25))
    p = LabelDistribution.from_counts([3, 1])
    np.testing.assert_allclose(p.reversed().probs, [0.25, 0.75])
    assert p.l1(LabelDistribution.uniform(2)) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        p.probs[0] = 0.0


# ============================================================
# Loss identities
# ============================================================

def test_gla_tau_zero_is_cross_entropy(rng):
    for _ in range(1000):
        n, C = int(rng.integers(1, 6)), int(rng.integers(2, 6))
        logits = gc.constant(rng.normal(scale=3.0, size=(n, C)))
        labels = rng.integers(0, C, size=n)
        pi_s = _random_prior(rng, C)
        gla = generalized_logit_adjusted(logits, labels, pi_s, tau=0.0).item()
        assert abs(gla - cross_entropy(logits, labels).item()) <= 1e-12


def _direct_balanced_softmax(logits, labels, prior):
    """Mean of log-sum-exp(z + log prior) - (z + log prior)[label], in plain numpy."""
    shifted = logits + np.log(prior)
    top = shifted.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(shifted - top).sum(axis=1))
    return float(np.mean(lse - shifted[np.arange(len(labels)), labels]))


def test_gla_tau_one_is_balanced_softmax(rng):
    for _ in range(1000):
        n, C = int(rng.integers(1, 6)), int(rng.integers(2, 6))
        raw = rng.normal(scale=3.0, size=(n, C))
        labels = rng.integers(0, C, size=n)
        pi_s = _random_prior(rng, C)
        expected = _direct_balanced_softmax(raw, labels, pi_s.probs)
        gla = generalized_logit_adjusted(gc.constant(raw), labels, pi_s, tau=1.0).item()
        assert abs(gla - expected) <= 1e-12
        assert abs(balanced_softmax(gc.constant(raw), labels, pi_s).item() - expected) <= 1e-12


def test_cross_entropy_on_uniform_logits_is_log_c():
    logits = gc.constant(np.zeros((5, 4)))
    assert cross_entropy(logits, [0, 1, 2, 3, 0]).item() == pytest.approx(math.log(4), abs=1e-12)


def test_balanced_softmax_matches_direct_formula(rng):
    logits = rng.normal(size=(3, 4))
    labels = np.array([0, 3, 1])
    pi_s = _random_prior(rng, 4)
    shifted = logits + np.log(pi_s.probs)
    expected = -np.mean(shifted[np.arange(3), labels] - np.log(np.exp(shifted).sum(axis=1)))
    assert balanced_softmax(gc.constant(logits), labels, pi_s).item() == pytest.approx(expected, abs=1e-12)


def test_entropy_values():
    assert entropy_loss(gc.constant(np.zeros((3, 5)))).item() == pytest.approx(math.log(5))
    confident = entropy_loss(gc.constant([[50.0, -50.0], [-50.0, 50.0]])).item()
    assert 0.0 <= confident < 1e-15


def test_info_max_is_zero_for_uniform_predictions():
    assert info_max_loss(gc.constant(np.zeros((4, 3)))).item() == pytest.approx(0.0, abs=1e-12)


def test_info_max_rewards_diverse_confident_batches():
    diverse = gc.constant([[20.0, 0.0, 0.0], [0.0, 20.0, 0.0], [0.0, 0.0, 20.0]])
    collapsed = gc.constant([[20.0, 0.0, 0.0]] * 3)
    assert info_max_loss(diverse).item() < info_max_loss(collapsed).item()


def test_pseudo_label_uses_argmax():
    logits = gc.constant([[2.0, 1.0], [0.0, 3.0]])
    assert pseudo_label_loss(logits).item() == pytest.approx(cross_entropy(logits, [0, 1]).item())


def test_loss_gradients(rng):
    pi_s = _random_prior(rng, 4)
    labels = np.array([0, 1, 3, 2, 3])
    for _ in range(20):
        logits = gc.parameter(rng.normal(size=(5, 4)))
        for fn in (
            lambda z: generalized_logit_adjusted(z, labels, pi_s, 2.0),
            lambda z: cross_entropy(z, labels),
            entropy_loss,
            info_max_loss,
            pseudo_label_loss,
        ):
            assert gc.check_gradients(fn, [logits]) <= 1e-4


# ============================================================
# Errors and post-hoc adjustment
# ============================================================

def test_label_errors():
    logits = gc.constant(np.zeros((2, 3)))
    with pytest.raises(InputError):
        cross_entropy(logits, [0, 3])
    with pytest.raises(InputError):
        cross_entropy(logits, [-1, 0])
    with pytest.raises(DimensionError):
        cross_entropy(logits, [0])
    with pytest.raises(DimensionError):
        generalized_logit_adjusted(logits, [0, 1], LabelDistribution.uniform(4), 1.0)
    with pytest.raises(InputError):
        info_max_loss(gc.constant(np.zeros((1, 3))))


def test_posthoc_adjust_shifts_by_log_ratio():
    logits = np.zeros((2, 2))
    target = LabelDistribution(np.array([0.8, 0.2]))
    adjusted = posthoc_logit_adjust(logits, target, LabelDistribution.uniform(2))
    np.testing.assert_allclose(adjusted[0], np.log([0.8, 0.2]) - np.log(0.5))
    same = posthoc_logit_adjust(logits, target, target)
    np.testing.assert_array_equal(same, logits)


def test_posthoc_adjust_flips_the_argmax():
    pi_s = LabelDistribution(np.array([0.9, 0.1]))
    target = LabelDistribution(np.array([0.1, 0.9]))
    adjusted = posthoc_logit_adjust(np.zeros((1, 2)), target, pi_s)
    assert int(adjusted.argmax(axis=1)[0]) == 1


def test_posthoc_adjust_agrees_with_bayes_reweighting(rng):
    C = 6
    logits = rng.normal(scale=2.0, size=(1000, C))
    pi_s, target = _random_prior(rng, C), _random_prior(rng, C)
    probs = gc.softmax_rows(logits)
    reweighted = probs * target.probs / pi_s.probs
    reweighted /= reweighted.sum(axis=1, keepdims=True)
    adjusted = posthoc_logit_adjust(logits, target, pi_s)
    np.testing.assert_array_equal(adjusted.argmax(axis=1), reweighted.argmax(axis=1))
    np.testing.assert_allclose(gc.softmax_rows(adjusted), reweighted, atol=1e-12)
