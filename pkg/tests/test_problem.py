import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from tilq import ProblemError, TimeGrid, aggregates, load_problem, sample, validate
from tilq.problem import FeedbackControl, to_half


def base(**kw):
    raw = {"n": 2, "m": 1, "T": 1.0, "N": 10}
    raw.update(kw)
    return raw


def test_scalar_constant_problem_accepted():
    p = validate({"n": 1, "m": 1, "T": 2.0, "N": 4, "A": 0.5, "Q": 1.0, "R": 2.0, "G": 3.0, "x0": 1.0})
    assert p.symmetry_correction == 0.0
    assert p.A.shape == (5, 1, 1)
    assert_array_equal(p.Q[:, 0, 0], 1.0)
    assert p.G.shape == (1, 1)


def test_roundoff_asymmetry_is_symmetrized():
    Q = [[1.0, 1.0], [1.0 + 1e-15, 2.0]]
    p = validate(base(Q=Q))
    assert_array_equal(p.Q, np.swapaxes(p.Q, 1, 2))
    assert 0 < p.symmetry_correction < 1e-14


def test_large_asymmetry_rejected():
    with pytest.raises(ProblemError) as err:
        validate(base(Q=[[1.0, 0.0], [1e-3, 1.0]]))
    assert err.value.field == "Q"


def test_dimension_mismatch_names_field():
    with pytest.raises(ProblemError) as err:
        validate(base(B=[[1.0, 0.0], [0.0, 1.0]]))  # n x (m+1)
    assert err.value.field == "B"


def test_non_finite_rejected():
    with pytest.raises(ProblemError) as err:
        validate(base(b=[float("nan"), 0.0]))
    assert err.value.field == "b"


@pytest.mark.parametrize("N", [0, 1, 2.5])
def test_grid_needs_two_intervals(N):
    with pytest.raises(ProblemError):
        TimeGrid(1.0, N)


def test_per_node_paths():
    q = np.linspace(0.0, 1.0, 11)
    p = validate({"n": 1, "m": 1, "T": 1.0, "N": 10, "Q": q.reshape(-1, 1, 1).tolist(), "b": q.tolist()})
    assert_array_equal(p.Q[:, 0, 0], q)
    assert_array_equal(p.b[:, 0], q)


def test_load_problem_reports_json_position(tmp_path):
    f = tmp_path / "bad.json"
    f.write_text('{"n": 1,\n "m": }')
    with pytest.raises(ProblemError) as err:
        load_problem(f)
    assert err.value.field == "<json>"
    assert "line 2" in str(err.value)


def test_load_problem_roundtrip(tmp_path):
    f = tmp_path / "p.json"
    f.write_text(json.dumps(base(A=[[0.0, 1.0], [-1.0, 0.0]], name="osc")))
    p = load_problem(f)
    assert p.meta["name"] == "osc"
    assert_array_equal(p.A[3], [[0.0, 1.0], [-1.0, 0.0]])


def test_aggregates_zero_tilde():
    p = validate(base(R=2.0))
    agg = aggregates(p)
    assert_array_equal(agg.R, p.R)


def test_aggregates_identity_sum():
    p = validate({"n": 1, "m": 2, "T": 1.0, "N": 3, "R": np.eye(2).tolist(), "R_tilde": np.eye(2).tolist()})
    assert_array_equal(aggregates(p).R, np.broadcast_to(2 * np.eye(2), (4, 2, 2)))


def test_mean_variance_weights_give_variance():
    # <G x, x> + <Gt E x, E x> with G = I, Gt = -I is E|X|^2 - |E X|^2 = Var X
    p = validate({"n": 2, "m": 1, "T": 1.0, "N": 2, "G": np.eye(2).tolist(), "G_tilde": (-np.eye(2)).tolist()})
    assert_array_equal(aggregates(p).G, np.zeros((2, 2)))
    rng = np.random.default_rng(0)
    X = rng.normal(size=(1000, 2)) + [3.0, -1.0]
    mean = X.mean(axis=0)
    quad = np.mean(np.einsum("pi,ij,pj->p", X, p.G, X)) + mean @ p.G_tilde @ mean
    assert_allclose(quad, np.sum(X.var(axis=0)), rtol=1e-12)


def test_sample_constant_and_nodes():
    grid = TimeGrid(1.0, 10)
    const = np.full((11, 2, 2), 3.0)
    assert_array_equal(sample(const, 0.37, grid), np.full((2, 2), 3.0))
    path = np.random.default_rng(1).normal(size=(11, 3))
    for k in range(11):
        assert_array_equal(sample(path, grid.nodes[k], grid), path[k])
    assert_array_equal(sample(path, 0.3, grid), path[3])


def test_sample_linear_path_midpoint():
    grid = TimeGrid(1.0, 8)
    path = grid.nodes.copy()
    s = 0.5 * (grid.nodes[2] + grid.nodes[3])
    assert abs(sample(path, s, grid) - s) <= 1e-15


@pytest.mark.parametrize("s", [-1e-9, 1.0 + 1e-9, 5.0])
def test_sample_never_extrapolates(s):
    grid = TimeGrid(1.0, 4)
    with pytest.raises(ValueError):
        sample(np.zeros(5), s, grid)


def test_to_half_interpolates_midpoints():
    grid = TimeGrid(2.0, 4)
    half = to_half(grid.nodes**2, grid)
    assert half.shape == (9,)
    assert_allclose(half[1::2], 0.5 * (grid.nodes[:-1] ** 2 + grid.nodes[1:] ** 2))
    assert to_half(half, grid) is half


def test_feedback_control_open_loop_split():
    grid = TimeGrid(1.0, 4)
    fc = FeedbackControl.open_loop(grid, np.ones((5, 2)), n=3)
    assert fc.gain.shape == (9, 2, 3)
    assert not fc.gain.any()
    with pytest.raises(ValueError):
        FeedbackControl.build(grid, 1, 1, phi=np.full((5, 1), np.inf))


def test_replace_revalidates():
    p = validate(base())
    q = p.replace(G=[[2.0, 0.0], [0.0, 1.0]])
    assert q.G[0, 0] == 2.0 and p.G[0, 0] == 0.0


# ---------------------------------------------------------------------------
# properties

floats = st.floats(-5, 5, allow_nan=False)


def _raw(draw_vals):
    a, r, rt, q, qt, s, st_ = draw_vals
    return {
        "n": 1,
        "m": 1,
        "T": 1.0,
        "N": 3,
        "A": a,
        "R": r,
        "R_tilde": rt,
        "Q": q,
        "Q_tilde": qt,
        "S": s,
        "S_tilde": st_,
        "G": a,
        "G_tilde": r,
    }


@given(st.tuples(*[floats] * 7), st.tuples(*[floats] * 7))
@settings(max_examples=50, deadline=None)
def test_aggregates_linear(v1, v2):
    p1, p2 = validate(_raw(v1)), validate(_raw(v2))
    p12 = validate(_raw(tuple(a + b for a, b in zip(v1, v2))))
    a1, a2, a12 = aggregates(p1), aggregates(p2), aggregates(p12)
    for key in ("R", "Q", "G", "S"):
        assert_allclose(getattr(a12, key), getattr(a1, key) + getattr(a2, key), atol=1e-12)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_validate_idempotent(seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(2, 2))
    raw = base(A=M.tolist(), Q=(M @ M.T).tolist(), S=rng.normal(size=(1, 2)).tolist(), sigma=rng.normal(size=2).tolist())
    once = validate(raw)
    twice = validate(once)
    for key in ("A", "Q", "S", "sigma", "G"):
        assert_array_equal(getattr(once, key), getattr(twice, key))


@given(st.floats(0, 1, allow_nan=False), st.integers(2, 30))
@settings(max_examples=100, deadline=None)
def test_sample_stays_within_bracket(s, N):
    grid = TimeGrid(1.0, N)
    path = np.sin(7 * grid.nodes)
    val = sample(path, s, grid)
    k = min(int(s / grid.h), N - 1)
    lo, hi = sorted((path[k], path[k + 1]))
    assert lo - 1e-12 <= val <= hi + 1e-12
