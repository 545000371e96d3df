"""Open-loop equilibrium check for a deterministic candidate control.

The second-order condition needs only the u-free ``P1`` of the open-loop
kernel. The first-order condition

    R_agg u + S_agg X - B' M(s, s) - D' N(s) = 0

with ``M(s, s) = (P1 + P2) X + P3 + P4`` and ``N = P1 (C X + D u + sigma)``
is affine in the state, so along the exact mean trajectory it is checked
deterministically. When the state is genuinely random the identity must hold
path by path; a handful of sampled paths is then checked as well, and the
report labels that evidence as sampled.
"""

from __future__ import annotations

import numpy as np

from .kernels import AdjointPair, integrate_forward, solve_open_kernel, solve_open_p1
from .linalg import Tolerances
from .montecarlo import simulate
from .problem import CoefficientSet, FeedbackControl, to_half
from .representation import EquilibriumReport, StrategyPair, margin_path

__all__ = [
    "second_order_condition",
    "check_open",
    "open_first_order_residual",
    "mean_trajectory",
    "induced_control",
]

PATHWISE_SAMPLES = 8


def second_order_condition(problem: CoefficientSet) -> np.ndarray:
    """Margin ``min eig(R_agg - D' P1 D)`` at every node (independent of u)."""
    return margin_path(problem, solve_open_p1(problem))


def _as_path(problem: CoefficientSet, u) -> np.ndarray:
    if isinstance(u, (FeedbackControl, StrategyPair)) or hasattr(u, "feedback"):
        raise TypeError("check_open takes a deterministic control path; feedback candidates go through synthesize_rep")
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u.reshape(-1, problem.m)
    return to_half(u, problem.grid)


def mean_trajectory(problem: CoefficientSet, u_half: np.ndarray, x0=None) -> np.ndarray:
    """Exact-in-expectation state mean under the deterministic control (RK4, nodes)."""
    hc, grid = problem.half, problem.grid

    def f(s, m):
        j = grid.half_index(s)
        return hc.A[j] @ m + hc.B[j] @ u_half[j] + hc.b[j]

    return integrate_forward(f, problem.x0 if x0 is None else x0, grid)


def open_first_order_residual(problem: CoefficientSet, kernel, u_nodes: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Node-wise stationarity residual vectors along state samples ``X`` (N+1, n)."""
    p = problem
    adj = AdjointPair(kernel, p)
    Rn = p.R + p.R_tilde
    Sn = p.S + p.S_tilde
    out = np.empty((p.N + 1, p.m))
    for k in range(p.N + 1):
        M = adj.M(k, X[k])
        Nk = adj.N(k, X[k], u_nodes[k])
        out[k] = Rn[k] @ u_nodes[k] + Sn[k] @ X[k] - p.B[k].T @ M - p.D[k].T @ Nk
    return out


def check_open(problem: CoefficientSet, u, tol: Tolerances = Tolerances(), seed: int = 0) -> EquilibriumReport:
    """Evaluate both equilibrium conditions for the deterministic control ``u``.

    ``u`` is given on the nodes ``(N+1, m)`` or the half grid ``(2N+1, m)``.
    """
    p = problem
    u_half = _as_path(p, u)
    u_nodes = u_half[0::2]
    kernel = solve_open_kernel(p, u_half)
    margin = second_order_condition(p)
    mean = mean_trajectory(p, u_half)
    res = np.linalg.norm(open_first_order_residual(p, kernel, u_nodes, mean), axis=1)
    extra = {"residual_source": "mean trajectory"}
    notes = []
    random_state = bool(np.any(p.sigma) or np.any(p.C) or np.any(p.D))
    if random_state:
        ens = simulate(p, u_half, base_seed=seed, n_paths=PATHWISE_SAMPLES)
        per_path = np.array(
            [np.linalg.norm(open_first_order_residual(p, kernel, u_nodes, ens.paths[i]), axis=1).max() for i in range(PATHWISE_SAMPLES)]
        )
        q = np.quantile(per_path, [0.0, 0.5, 0.9, 1.0])
        extra["sampled_pathwise_check"] = {
            "paths": PATHWISE_SAMPLES,
            "seed": int(seed),
            "max_residual_quantiles": {"0": float(q[0]), "0.5": float(q[1]), "0.9": float(q[2]), "1": float(q[3])},
        }
        if q[3] > tol.res:
            notes.append(f"sampled pathwise check: residual up to {q[3]:.3e} on individual paths")
    zeros = np.zeros(p.N + 1)
    return EquilibriumReport(
        kind="open",
        times=p.grid.nodes,
        second_order_margin=margin,
        first_order_residual=res,
        range_slack_gain=zeros,
        range_slack_affine=zeros.copy(),
        free_dim=np.zeros(p.N + 1, dtype=int),
        tolerances=tol,
        diagnostics=tuple(notes),
        extra=extra,
    )


def induced_control(problem: CoefficientSet, strategy: StrategyPair) -> np.ndarray:
    """Deterministic control ``theta X + phi`` along the mean closed-loop trajectory.

    Returned on the half grid. Midpoint states come from cubic Hermite
    interpolation of the RK4 node values, which keeps the control fourth-order
    accurate, so a representation feeds :func:`check_open` without losing
    accuracy. With noise in the state this is the control of the mean path,
    not an adapted process.
    """
    p = problem
    hc, grid = p.half, p.grid
    th, ph = strategy.theta_half, strategy.phi_half

    def f(s, x):
        j = grid.half_index(s)
        return (hc.A[j] + hc.B[j] @ th[j]) @ x + hc.B[j] @ ph[j] + hc.b[j]

    X = integrate_forward(f, p.x0, grid)
    F = np.stack([f(grid.nodes[k], X[k]) for k in range(p.N + 1)])
    Xh = np.empty((2 * p.N + 1, p.n))
    Xh[0::2] = X
    Xh[1::2] = 0.5 * (X[:-1] + X[1:]) + (grid.h / 8.0) * (F[:-1] - F[1:])
    return np.einsum("kij,kj->ki", th, Xh) + ph
