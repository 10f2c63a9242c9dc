import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from htl.embedding import (
    DegenerateActivationError,
    l2_normalize,
    pairwise_squared_distances,
    squared_distance,
)

from conftest import unit_rows

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_normalize_three_four_five():
    np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8], atol=1e-15)


def test_normalize_unit_vector_unchanged():
    np.testing.assert_array_equal(l2_normalize([1.0, 0.0, 0.0]), [1.0, 0.0, 0.0])


def test_normalize_random_norm(rng):
    out = l2_normalize(rng.normal(size=8))
    assert abs(np.linalg.norm(out) - 1.0) < 1e-9


def test_normalize_zero_vector_raises():
    with pytest.raises(DegenerateActivationError):
        l2_normalize(np.zeros(4))
    with pytest.raises(DegenerateActivationError):
        l2_normalize(np.full(3, 1e-14))


@given(arrays(np.float64, st.integers(1, 16), elements=finite))
def test_normalize_idempotent(v):
    if np.linalg.norm(v) < 1e-6:
        return
    once = l2_normalize(v)
    np.testing.assert_allclose(l2_normalize(once), once, atol=1e-12)


@pytest.mark.parametrize(
    "u, v, expected",
    [((0.6, 0.8), (0.6, 0.8), 0.0), ((1.0, 0.0), (-1.0, 0.0), 4.0), ((1.0, 0.0), (0.0, 1.0), 2.0)],
)
def test_squared_distance_examples(u, v, expected):
    assert squared_distance(u, v) == pytest.approx(expected, abs=1e-15)


def test_squared_distance_dimension_mismatch():
    with pytest.raises(ValueError):
        squared_distance([1.0, 0.0], [1.0, 0.0, 0.0])


@settings(max_examples=200)
@given(st.integers(1, 32), st.integers(0, 2**32 - 1))
def test_squared_distance_range_and_dot_identity(d, seed):
    u, v = unit_rows(np.random.default_rng(seed), 2, d)
    dist = squared_distance(u, v)
    assert -1e-12 <= dist <= 4 + 1e-12
    assert abs(dist - (2 - 2 * u @ v)) < 1e-10
    assert dist == squared_distance(v, u)


def test_pairwise_two_vectors():
    np.testing.assert_allclose(pairwise_squared_distances([[1.0, 0.0], [0.0, 1.0]]), [[0, 2], [2, 0]])


def test_pairwise_empty():
    assert pairwise_squared_distances(np.zeros((0, 3))).shape == (0, 0)


def test_pairwise_matches_double_loop_exactly(rng):
    X = unit_rows(rng, 20, 7)
    naive = np.array([[squared_distance(a, b) for b in X] for a in X])
    M = pairwise_squared_distances(X)
    np.testing.assert_array_equal(M, naive)
    np.testing.assert_array_equal(np.diag(M), 0.0)
    np.testing.assert_array_equal(M, M.T)
