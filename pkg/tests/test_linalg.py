import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from tilq.linalg import pinv, psd_margin, range_inclusion, solve_affine


def penrose_residuals(M, Mp):
    return (
        np.linalg.norm(M @ Mp @ M - M),
        np.linalg.norm(Mp @ M @ Mp - Mp),
        np.linalg.norm((M @ Mp).T - M @ Mp),
        np.linalg.norm((Mp @ M).T - Mp @ M),
    )


def test_pinv_identity():
    r = pinv(np.eye(3))
    assert_array_equal(r.pinv, np.eye(3))
    assert r.rank == 3


def test_pinv_diagonal_with_zero():
    r = pinv(np.diag([2.0, 0.0]))
    assert_allclose(r.pinv, np.diag([0.5, 0.0]))
    assert r.rank == 1


def test_pinv_random_rectangular_identities():
    M = np.random.default_rng(0).normal(size=(3, 2))
    r = pinv(M)
    assert r.pinv.shape == (2, 3)
    assert max(penrose_residuals(M, r.pinv)) <= 1e-10 * (1 + np.linalg.norm(M))


def test_pinv_rejects_bad_input():
    with pytest.raises(np.linalg.LinAlgError):
        pinv(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        pinv(np.eye(2), rtol=0.0)


def test_psd_margin_examples():
    assert psd_margin(np.eye(3)) == pytest.approx(1.0)
    assert psd_margin(np.diag([1.0, -0.001])) == pytest.approx(-0.001)
    v = np.array([1.0, -2.0, 0.5])
    assert abs(psd_margin(np.outer(v, v))) <= 1e-14


def test_psd_margin_non_finite():
    with pytest.raises(np.linalg.LinAlgError):
        psd_margin(np.array([[np.inf]]))


def test_range_inclusion_examples():
    rng = np.random.default_rng(2)
    M = rng.normal(size=(3, 2))
    W = M @ rng.normal(size=(2, 4))
    r = range_inclusion(W, M)
    assert r.contained and r.slack <= 1e-12

    W = np.array([[3.0], [4.0]])
    r = range_inclusion(W, np.zeros((2, 2)))
    assert not r.contained
    assert r.slack == pytest.approx(5.0 / 6.0)

    assert range_inclusion(rng.normal(size=(3, 5)), rng.normal(size=(3, 3))).contained


def test_range_inclusion_shape_mismatch():
    with pytest.raises(ValueError):
        range_inclusion(np.ones((3, 1)), np.eye(2))


def test_solve_affine_examples():
    v = np.array([1.0, -4.0])
    assert_allclose(solve_affine(2 * np.eye(2), v).x, v / 2)

    r = solve_affine(np.diag([1.0, 0.0]), np.array([1.0, 0.0]))
    assert_allclose(r.x, [1.0, 0.0])
    assert r.residual == 0.0

    r = solve_affine(np.diag([1.0, 0.0]), np.array([0.0, 1.0]))
    assert_allclose(r.x, [0.0, 0.0])
    assert r.residual == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# properties


def low_rank(seed, p, q, rank):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(p, rank)) @ rng.normal(size=(rank, q))


mats = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=st.floats(-10, 10, allow_nan=False))


@given(mats)
@settings(max_examples=100, deadline=None)
def test_penrose_identities(M):
    r = pinv(M)
    # singular values dropped below the cutoff perturb M by at most cutoff
    tol = 1e-10 * (1 + np.linalg.norm(M)) + 10 * r.cutoff * np.sqrt(min(M.shape))
    assert max(penrose_residuals(M, r.pinv)) <= tol * (1 + np.linalg.norm(r.pinv))


@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5))
@settings(max_examples=50, deadline=None)
def test_pinv_involution(seed, p, q, rank):
    M = low_rank(seed, p, q, min(rank, p, q))
    back = pinv(pinv(M).pinv).pinv
    assert np.linalg.norm(back - M) <= 1e-9 * (1 + np.linalg.norm(M))


@given(arrays(np.float64, (3, 3), elements=st.floats(-10, 10, allow_nan=False)))
@settings(max_examples=100, deadline=None)
def test_psd_margin_transpose_invariant(M):
    assert psd_margin(M) == psd_margin(M.T)


@given(st.integers(0, 10_000), st.integers(1, 4))
@settings(max_examples=50, deadline=None)
def test_range_inclusion_implies_solvable(seed, rank):
    rng = np.random.default_rng(seed)
    M = low_rank(seed, 4, 4, rank)
    W = M @ rng.normal(size=(4, 2))
    tol = 1e-8
    r = range_inclusion(W, M, tol)
    assert r.contained
    x = solve_affine(M, W).x
    assert np.linalg.norm(M @ x - W) <= tol * (1 + np.linalg.norm(W))
