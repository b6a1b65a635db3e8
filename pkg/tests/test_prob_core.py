"""
Tests for the log-space probability algebra
"""

import math

import numpy as np
import pytest

from errors import InvalidInputError, ShapeError
from prob_core import (LogitVector, ProbVector, erase, erase_multi, erase_multi_rows, erase_rows, from_scores,
                       inject_prior, inject_prior_rows, random_prob_vector, softmax, to_logits, uniform)


def pv(*values):
    return ProbVector(np.array(values, dtype=np.float64))


# ==================== TYPES ====================

def test_prob_vector_floors_and_renormalizes():
    p = pv(1.0, 0.0)
    assert p.probs.min() >= 1e-12 * 0.999
    assert math.isclose(float(p.probs.sum()), 1.0, abs_tol=1e-12)


def test_prob_vector_is_read_only():
    p = pv(0.3, 0.7)
    with pytest.raises(ValueError):
        p.probs[0] = 0.5


@pytest.mark.parametrize("values", [[1.0], [[0.5, 0.5]]])
def test_prob_vector_rejects_bad_shapes(values):
    with pytest.raises(ShapeError):
        ProbVector(np.array(values))


@pytest.mark.parametrize("values", [[0.5, -0.1], [float("nan"), 1.0], [0.0, 0.0]])
def test_prob_vector_rejects_invalid_values(values):
    with pytest.raises(InvalidInputError):
        ProbVector(np.array(values))


def test_logit_vector_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        LogitVector(np.array([0.0, float("inf")]))


# ==================== SOFTMAX ====================

def test_softmax_of_zeros_is_uniform():
    assert softmax([0.0, 0.0, 0.0]).allclose(uniform(3))


def test_softmax_exact_exponentials():
    assert np.allclose(softmax([math.log(3), 0.0]).probs, [0.75, 0.25], atol=1e-15)


def test_softmax_shift_invariance(rng):
    for _ in range(50):
        z = rng.normal(size=5) * 10
        c = rng.normal() * 100
        assert softmax(z + c).allclose(softmax(z), atol=1e-12)


def test_softmax_large_logits_are_stable():
    p = softmax([1000.0, 0.0])
    assert np.all(np.isfinite(p.probs))
    assert p.argmax() == 0


def test_softmax_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        softmax([float("nan"), 0.0])


# ==================== ERASE ====================

def test_erase_uniform_rule_is_identity():
    assert erase(pv(0.8, 0.2), pv(0.5, 0.5)).allclose(pv(0.8, 0.2))


def test_erase_known_value():
    out = erase(pv(0.8, 0.2), pv(0.6, 0.4))
    assert np.allclose(out.probs, [0.72727272727, 0.27272727273], atol=1e-9)


def test_erase_full_cancellation_gives_uniform(rng):
    p = random_prob_vector(rng, 4)
    assert erase(p, p).allclose(uniform(4), atol=1e-12)


def test_erase_length_mismatch():
    with pytest.raises(ShapeError):
        erase(pv(0.5, 0.5), pv(0.2, 0.3, 0.5))


def test_erase_multi_examples():
    assert erase_multi(pv(0.8, 0.2), [pv(0.5, 0.5), pv(0.5, 0.5)]).allclose(pv(0.8, 0.2))
    assert erase_multi(pv(0.8, 0.2), [pv(0.5, 0.5), pv(0.8, 0.2)]).allclose(pv(0.5, 0.5), atol=1e-12)


def test_erase_multi_empty_list_returns_model():
    p = pv(0.8, 0.2)
    assert erase_multi(p, []) is p


def test_erase_multi_length_mismatch():
    with pytest.raises(ShapeError):
        erase_multi(pv(0.8, 0.2), [pv(0.5, 0.5), pv(0.2, 0.3, 0.5)])


def test_erase_multi_stacking_is_sequential_and_order_free(rng):
    for _ in range(100):
        p, a, b = (random_prob_vector(rng, 5) for _ in range(3))
        stacked = erase_multi(p, [a, b])
        assert stacked.allclose(erase(erase(p, a), b), atol=1e-9)
        assert stacked.allclose(erase_multi(p, [b, a]), atol=1e-9)


def test_uniform_rules_keep_argmax(rng):
    for _ in range(100):
        p = random_prob_vector(rng, 6)
        assert erase_multi(p, [uniform(6), uniform(6)]).argmax() == p.argmax()


# ==================== INJECT PRIOR ====================

def test_inject_uniform_prior_is_identity():
    assert inject_prior(pv(0.3, 0.7), pv(0.5, 0.5)).allclose(pv(0.3, 0.7))


def test_inject_prior_known_value():
    assert inject_prior(pv(0.5, 0.5), pv(0.9, 0.1)).allclose(pv(0.9, 0.1), atol=1e-12)


def test_inject_prior_rejects_zero_prior():
    with pytest.raises(InvalidInputError):
        inject_prior_rows(np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]]))


@pytest.mark.parametrize("k", [2, 3, 10])
def test_identity_and_round_trip_over_random_vectors(k):
    rng = np.random.default_rng(k)
    for _ in range(1000):
        p = random_prob_vector(rng, k)
        q = random_prob_vector(rng, k)
        assert erase(p, uniform(k)).allclose(p, atol=1e-12)
        assert erase(inject_prior(p, q), q).allclose(p, atol=1e-9)


def test_outputs_are_normalized(rng):
    for _ in range(100):
        p, q = random_prob_vector(rng, 4), random_prob_vector(rng, 4)
        for out in (erase(p, q), inject_prior(p, q), erase_multi(p, [q, p])):
            assert abs(float(out.probs.sum()) - 1.0) < 1e-9
            assert np.all(out.probs > 0) and np.all(out.probs <= 1)


# ==================== BATCHED FORMS ====================

def test_rows_match_vector_operations(rng):
    P = rng.dirichlet(np.ones(3), size=20)
    Q = rng.dirichlet(np.ones(3), size=20)
    batched = erase_rows(P, Q)
    for i in range(20):
        assert np.allclose(batched[i], erase(ProbVector(P[i]), ProbVector(Q[i])).probs, rtol=0, atol=1e-15)


def test_erase_multi_rows_shape_mismatch():
    with pytest.raises(ShapeError):
        erase_multi_rows(np.full((2, 2), 0.5), [np.full((3, 2), 0.5)])


# ==================== INGEST ====================

def test_from_scores_expands_single_score():
    assert from_scores([0.7]).allclose(pv(0.3, 0.7))


def test_from_scores_normalizes_sigmoid_vector():
    assert from_scores([0.9, 0.3], k=2).allclose(pv(0.75, 0.25), atol=1e-12)


def test_from_scores_rejects_out_of_range_single_score():
    with pytest.raises(InvalidInputError):
        from_scores([1.5])


def test_to_logits_round_trip(rng):
    p = random_prob_vector(rng, 5)
    assert softmax(to_logits(p)).allclose(p, atol=1e-12)
