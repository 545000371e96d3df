import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.linalg import expm

from instances import general_instance, mean_variance, scalar, zero_problem
from tilq import validate
from tilq.kernels import solve_open_kernel
from tilq.montecarlo import MCParams, PerturbationProbe, perturbation_quotients
from tilq.openloop import check_open, induced_control, mean_trajectory, open_first_order_residual, second_order_condition
from tilq.problem import to_half
from tilq.representation import synthesize_rep


def hamiltonian_control(p):
    """Optimal deterministic LQ control from the Hamiltonian flow (no Riccati solve)."""
    A, B, Q, R, G = p.A[0], p.B[0], p.Q[0], p.R[0], p.G
    n = p.n
    H = np.block([[A, -B @ np.linalg.solve(R, B.T)], [-Q, -A.T]])
    top = np.vstack([np.eye(n), G])
    XT = np.linalg.solve((expm(-H * p.T) @ top)[:n], p.x0)
    flow = [expm(H * (s - p.T)) @ top @ XT for s in p.grid.half_nodes]
    return np.array([-np.linalg.solve(R, B.T @ z[n:]) for z in flow])


def deterministic_lq(N):
    return validate(
        {
            "n": 2,
            "m": 1,
            "T": 1.0,
            "N": N,
            "A": [[0.0, 1.0], [-1.0, -0.2]],
            "B": [[0.0], [1.0]],
            "Q": np.eye(2).tolist(),
            "R": 0.5,
            "G": np.eye(2).tolist(),
            "x0": [1.0, 0.0],
        }
    )


def test_zero_problem_zero_control_passes():
    p = zero_problem()
    r = check_open(p, np.zeros((p.N + 1, p.m)))
    assert r.verdict
    assert np.max(r.first_order_residual) == 0.0


def test_hamiltonian_optimum_is_open_equilibrium():
    p = deterministic_lq(200)
    r = check_open(p, hamiltonian_control(p))
    assert r.verdict
    assert np.max(r.first_order_residual) <= 1e-8
    assert "sampled_pathwise_check" not in r.extra


def test_suboptimal_control_fails():
    p = deterministic_lq(100)
    u = hamiltonian_control(p) + 0.1
    r = check_open(p, u)
    assert not r.verdict
    assert any("first-order" in n for n in r.notes())


def test_induced_rep_control_passes():
    for N, bound in ((100, 1e-8), (200, 1e-9)):
        p = general_instance(N=N).replace(C=np.zeros((2, 2)), D=np.zeros((2, 1)), sigma=[0.0, 0.0])
        strategy, _, _ = synthesize_rep(p)
        r = check_open(p, induced_control(p, strategy))
        assert np.max(r.first_order_residual) <= bound


def test_random_state_adds_pathwise_sample():
    p = mean_variance()
    strategy, _, _ = synthesize_rep(p)
    r = check_open(p, induced_control(p, strategy), seed=3)
    info = r.extra["sampled_pathwise_check"]
    assert info["paths"] == 8 and info["seed"] == 3
    assert r.extra["residual_source"] == "mean trajectory"


def test_zero_control_fails_mean_variance():
    p = mean_variance()
    assert not check_open(p, np.zeros((p.N + 1, 1))).verdict


def test_feedback_candidate_rejected():
    p = scalar(N=10)
    strategy, _, _ = synthesize_rep(p)
    with pytest.raises(TypeError):
        check_open(p, strategy)


def test_mean_trajectory_linear_growth():
    p = scalar(N=50, A=0.5, x0=2.0)
    m = mean_trajectory(p, np.zeros((101, 1)))
    assert_allclose(m[:, 0], 2.0 * np.exp(0.5 * p.grid.nodes), rtol=1e-9)


def test_second_order_condition_independent_of_control():
    p = scalar(N=40, D=1.0, R=1.0, G=0.5)
    # P1 = -G constant (A = C = Q = 0): margin R + G
    assert_allclose(second_order_condition(p), 1.5, rtol=1e-14)


def test_agrees_with_simulation():
    p = mean_variance(N=50)
    h = p.grid.h
    mc = MCParams(3, outer=256, inner=64)
    rep, _, _ = synthesize_rep(p)
    u = induced_control(p, rep)
    assert check_open(p, u).verdict
    probes = [PerturbationProbe(t, (v,), (2 * h, 4 * h), mode="open") for t in (0.0, 0.5) for v in (1.0, -1.0)]
    table = perturbation_quotients(p, u, probes, mc)
    assert all(r.quotient >= -2 * r.stderr for r in table.rows)

    # zero control: stepping along minus the residual lowers the cost
    zero = np.zeros((p.N + 1, 1))
    report = check_open(p, zero)
    assert not report.verdict
    res = open_first_order_residual(p, solve_open_kernel(p, to_half(zero, p.grid)), zero, mean_trajectory(p, to_half(zero, p.grid)))
    for t in (0.0, 0.5):
        v = tuple(-res[p.grid.index(t)])
        table = perturbation_quotients(p, zero, [PerturbationProbe(t, v, (2 * h, 4 * h), mode="open")], mc)
        assert all(r.quotient <= -3 * r.stderr for r in table.rows)
