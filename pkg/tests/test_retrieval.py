import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from budgetcl.retrieval import (decay_rate, draw_batch, effective_use_frequency, retrieval_probs,
                                select_param_subset, subset_size, update_similarity)


def test_effective_use_frequency_example():
    # class A = 0, class B = 1
    S = np.array([[0.5, -0.2], [-0.2, 0.0]])
    got = effective_use_frequency([1.0], [0], S, [3.0, 2.0])
    assert abs(got[0] - 2.1) < 1e-12
    assert np.array_equal(effective_use_frequency([0.3, 0.0], [0, 1], np.zeros((2, 2)), [5, 5]), [0.3, 0.0])


def test_retrieval_probs_closed_form():
    p = retrieval_probs([0.0, 0.125 * math.log(3)], 0.125)
    assert np.allclose(p, [0.75, 0.25], atol=1e-12)
    assert np.allclose(retrieval_probs([5, 5, 5], 0.3), [1 / 3] * 3, atol=1e-12)


def test_retrieval_probs_shift_invariant_and_stable():
    c = np.array([0.1, 2.0, 7.5])
    assert np.allclose(retrieval_probs(c, 0.5), retrieval_probs(c + 1e4, 0.5), atol=1e-12)
    p = retrieval_probs([0.0, 1e6], 1e-3)
    assert np.isfinite(p).all() and abs(p.sum() - 1) < 1e-12
    with pytest.raises(ValueError):
        retrieval_probs([], 1.0)


def test_retrieval_probs_decreasing_in_c():
    rng = np.random.default_rng(0)
    for _ in range(50):
        c = rng.uniform(0, 3, 6)
        i = rng.integers(6)
        c2 = c.copy()
        c2[i] += rng.uniform(0.01, 1)
        assert retrieval_probs(c2, 0.7)[i] < retrieval_probs(c, 0.7)[i]


def test_draw_batch():
    rng = np.random.default_rng(1)
    idx = draw_batch(np.full(100, 0.01), 16, rng)
    assert len(set(idx.tolist())) == 16
    assert sorted(draw_batch([0.5, 0.5], 2, rng).tolist()) == [0, 1]
    assert draw_batch([1.0, 0.0, 0.0], 1, rng).tolist() == [0]
    with pytest.raises(ValueError):
        draw_batch([1.0], 2, rng)


def test_single_draw_frequency():
    p = retrieval_probs([0.0, 0.125 * math.log(3)], 0.125)
    rng = np.random.default_rng(2024)
    hits = sum(draw_batch(p, 1, rng)[0] == 0 for _ in range(100_000))
    assert 0.745 <= hits / 100_000 <= 0.755


def test_decay_rate():
    assert decay_rate(16, 4, 100) == 0.04
    assert decay_rate(16, 4, 2) == 1 - 1e-6
    with pytest.raises(ValueError):
        decay_rate(16, 4, 0)


def test_subset_selection():
    assert subset_size(463_504) == 232
    assert subset_size(100) == 1
    idx = select_param_subset(10_000, np.random.default_rng(0), 0.01)
    assert len(idx) == 100 and len(np.unique(idx)) == 100 and np.all(np.diff(idx) > 0)


def test_similarity_identical_and_opposite():
    S = np.zeros((3, 3))
    g = np.array([[1.0, 2.0], [1.0, 2.0]])
    update_similarity(S, g, [0, 1], 0.01)
    assert abs(S[0, 1] - 0.01) < 1e-12 and S[1, 0] == S[0, 1]
    assert S[2, 2] == 0
    S = np.zeros((2, 2))
    update_similarity(S, np.array([[1.0, 0.0], [-1.0, 0.0]]), [0, 1], 0.01)
    assert abs(S[0, 1] + 0.01) < 1e-12


def test_similarity_skips_zero_gradients():
    S = np.zeros((2, 2))
    update_similarity(S, np.array([[0.0, 0.0], [1.0, 0.0]]), [0, 1], 0.5)
    assert np.all(S == 0)


def test_similarity_same_class_pairs():
    S = np.zeros((2, 2))
    update_similarity(S, np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]), [0, 0, 1], 1.0)
    assert abs(S[0, 0] - 0.0) < 1e-12
    assert abs(S[0, 1] - math.sqrt(0.5)) < 1e-12
    assert S[1, 1] == 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 20))
def test_similarity_bounded_symmetric(seed, rounds):
    rng = np.random.default_rng(seed)
    S = np.zeros((4, 4))
    for _ in range(rounds):
        g = rng.normal(size=(8, 5)) * rng.uniform(0, 3)
        update_similarity(S, g, rng.integers(0, 4, 8), float(rng.uniform(0.01, 1)))
        assert np.all(np.abs(S - S.T) <= 1e-12)
        assert np.all(np.abs(S) <= 1.0)


def test_frequency_loop_without_learning():
    # no gradients: S stays zero and heavier-used samples are always less likely
    rng = np.random.default_rng(0)
    c = np.zeros(30)
    for _ in range(200):
        p = retrieval_probs(c, 0.5)
        order = np.argsort(c)
        assert np.all(np.diff(p[order]) <= 1e-15)
        strict = np.diff(c[order]) > 1e-12
        assert np.all(np.diff(p[order])[strict] < 0)
        idx = draw_batch(p, 4, rng)
        c *= 1 - decay_rate(4, 4, 30)
        c[idx] += 1
