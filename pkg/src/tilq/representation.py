"""Closed-loop representations of open-loop equilibrium controls.

A representation is a pair ``(theta, phi)``, independent of the initial state,
with ``u* = theta X* + phi`` along the equilibrium trajectory. It is found by
a backward sweep of the representation kernel in which the pair is the
minimum-norm solution of the algebraic stationarity identities

    (R_agg - D' P1 D) theta = B' (P1 + P2) + D' P1 C - S_agg
    (R_agg - D' P1 D) phi   = B' (P3 + P4) + D' P1 sigma

evaluated on the current kernel values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import (
    KernelSolution,
    integrate_backward,
    integrate_backward_coupled,
    pack,
    rep_drift,
    solve_open_p1,
    unpack,
)
from .linalg import Tolerances, pinv, psd_margin, range_inclusion
from .problem import CoefficientSet, FeedbackControl, TimeGrid, to_half

__all__ = [
    "StrategyPair",
    "EquilibriumReport",
    "solve_rep_kernel",
    "synthesize_rep",
    "evaluate_rep",
    "rep_first_order_residual",
    "stationarity_residuals",
    "margin_path",
]


@dataclass(frozen=True, eq=False)
class StrategyPair:
    """Feedback pair ``u = theta X + phi`` on the half grid.

    ``kind`` is ``"open_rep"`` (representation of an open-loop equilibrium)
    or ``"closed_strategy"``. The midpoint samples are kept so that feeding
    the pair back into its kernel replays the synthesis sweep exactly.
    """

    grid: TimeGrid
    theta_half: np.ndarray  # (2N+1, m, n)
    phi_half: np.ndarray  # (2N+1, m)
    kind: str

    def __post_init__(self):
        if self.kind not in ("open_rep", "closed_strategy"):
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if not (np.all(np.isfinite(self.theta_half)) and np.all(np.isfinite(self.phi_half))):
            raise ValueError("strategy has non-finite entries")

    @classmethod
    def from_paths(cls, grid: TimeGrid, theta, phi, kind: str) -> "StrategyPair":
        """Build from node ``(N+1, ...)`` or half-grid ``(2N+1, ...)`` samples."""
        return cls(grid, to_half(theta, grid), to_half(phi, grid), kind)

    @classmethod
    def from_controls(cls, grid: TimeGrid, controls, kind: str) -> "StrategyPair":
        theta = np.stack([c[0] for c in controls])
        phi = np.stack([c[1] for c in controls])
        return cls(grid, theta, phi, kind)

    @property
    def theta(self) -> np.ndarray:
        return self.theta_half[0::2]

    @property
    def phi(self) -> np.ndarray:
        return self.phi_half[0::2]

    def with_theta(self, theta_half) -> "StrategyPair":
        return StrategyPair(self.grid, np.asarray(theta_half, dtype=float), self.phi_half, self.kind)

    def feedback(self) -> FeedbackControl:
        """Split the gain as the matching equilibrium notion sees it.

        For a representation the perturbed state does not re-enter the
        feedback (the gain sits in ``theta2``); for a closed-loop strategy it
        does (``theta1``).
        """
        zeros = np.zeros_like(self.theta_half)
        if self.kind == "open_rep":
            return FeedbackControl(zeros, self.theta_half, self.phi_half)
        return FeedbackControl(self.theta_half, zeros, self.phi_half)

    def controls(self):
        return [(self.theta_half[j], self.phi_half[j]) for j in range(self.theta_half.shape[0])]


@dataclass(frozen=True, eq=False)
class EquilibriumReport:
    """Node-wise evidence for one equilibrium characterization.

    ``verdict`` holds iff ``min(second_order_margin) >= -tol.psd`` and
    ``max(first_order_residual) <= tol.res`` and both range slacks are at most
    ``tol.range``. The conditions hold almost everywhere in continuous time;
    here they are certified at grid nodes only.
    """

    kind: str
    times: np.ndarray
    second_order_margin: np.ndarray
    first_order_residual: np.ndarray
    range_slack_gain: np.ndarray
    range_slack_affine: np.ndarray
    free_dim: np.ndarray
    tolerances: Tolerances
    diagnostics: tuple = ()
    extra: dict = field(default_factory=dict)

    @property
    def verdict(self) -> bool:
        t = self.tolerances
        return bool(
            np.min(self.second_order_margin) >= -t.psd
            and np.max(self.first_order_residual) <= t.res
            and np.max(self.range_slack_gain) <= t.range
            and np.max(self.range_slack_affine) <= t.range
        )

    def notes(self) -> list:
        t = self.tolerances
        out = list(self.diagnostics)
        k = int(np.argmin(self.second_order_margin))
        if self.second_order_margin[k] < -t.psd:
            out.append(f"second-order condition fails: margin {self.second_order_margin[k]:.3e} at t={self.times[k]:.6g}")
        k = int(np.argmax(self.first_order_residual))
        if self.first_order_residual[k] > t.res:
            out.append(f"first-order residual {self.first_order_residual[k]:.3e} at t={self.times[k]:.6g}")
        for name, slack in (("gain", self.range_slack_gain), ("affine", self.range_slack_affine)):
            k = int(np.argmax(slack))
            if slack[k] > t.range:
                out.append(f"{name} range inclusion fails: slack {slack[k]:.3e} at t={self.times[k]:.6g}")
        if np.any(self.free_dim > 0):
            out.append(f"pseudo-inverse has a null space at {int(np.count_nonzero(self.free_dim))} nodes; minimum-norm pair selected")
        return out

    def summary(self) -> dict:
        return {
            "kind": self.kind,
            "verdict": self.verdict,
            "min_second_order_margin": float(np.min(self.second_order_margin)),
            "max_first_order_residual": float(np.max(self.first_order_residual)),
            "max_range_slack_gain": float(np.max(self.range_slack_gain)),
            "max_range_slack_affine": float(np.max(self.range_slack_affine)),
            "max_free_dim": int(np.max(self.free_dim)),
            "tolerances": {
                "psd": self.tolerances.psd,
                "res": self.tolerances.res,
                "range": self.tolerances.range,
                "rtol": self.tolerances.rtol,
            },
            "notes": self.notes(),
            **self.extra,
        }


# ---------------------------------------------------------------------------
# shared machinery for both feedback notions


def _agg_half(problem: CoefficientSet):
    hc = problem.half
    return hc.R + hc.R_tilde, hc.S + hc.S_tilde


def _pair_feedback(problem: CoefficientSet, rtol: float):
    """Minimum-norm (theta, phi) from kernel values at a half-grid time."""
    hc, n, grid = problem.half, problem.n, problem.grid
    Ragg, Sagg = _agg_half(problem)

    def feedback(s, y):
        j = grid.half_index(s)
        P1, P2, P3, P4 = unpack(y, n)
        B, C, D = hc.B[j], hc.C[j], hc.D[j]
        Mp = pinv(Ragg[j] - D.T @ P1 @ D, rtol).pinv
        theta = Mp @ (B.T @ (P1 + P2) + D.T @ P1 @ C - Sagg[j])
        phi = Mp @ (B.T @ (P3 + P4) + D.T @ P1 @ hc.sigma[j])
        return theta, phi

    return feedback


def _terminal(problem: CoefficientSet) -> np.ndarray:
    return pack(-problem.G, -problem.G_tilde, np.zeros(problem.n), -problem.g)


def _frozen(drift, strategy: StrategyPair, grid: TimeGrid):
    ctrl = strategy.controls()

    def f(s, y):
        return drift(s, y, ctrl[grid.half_index(s)])

    return f


def stationarity_residuals(problem: CoefficientSet, strategy: StrategyPair, kernel: KernelSolution, rtol=1e-10):
    """Node-wise residuals of the two stationarity identities and range slacks.

    Returns
    -------
    gain_res, affine_res : ndarray (N+1,)
        ``|(R_agg - D'P1D) theta - [B'(P1+P2) + D'P1C - S_agg]|`` and the
        affine analogue, Frobenius / Euclidean norms.
    slack_gain, slack_affine : ndarray (N+1,)
        Range-inclusion slacks of the two right-hand sides.
    free_dim : ndarray of int (N+1,)
        Null-space dimension of ``R_agg - D'P1D``.
    margin : ndarray (N+1,)
        Smallest eigenvalue of ``R_agg - D'P1D`` with this kernel's P1.
    """
    p = problem
    Rn = p.R + p.R_tilde
    Sn = p.S + p.S_tilde
    N1 = p.N + 1
    out = {k: np.zeros(N1) for k in ("gain", "affine", "sg", "sa", "margin")}
    free = np.zeros(N1, dtype=int)
    th, ph = strategy.theta, strategy.phi
    for k in range(N1):
        P1, P2, P3, P4 = kernel.P1[k], kernel.P2[k], kernel.P3[k], kernel.P4[k]
        B, C, D = p.B[k], p.C[k], p.D[k]
        M = Rn[k] - D.T @ P1 @ D
        W = B.T @ (P1 + P2) + D.T @ P1 @ C - Sn[k]
        w = B.T @ (P3 + P4) + D.T @ (P1 @ p.sigma[k] + kernel.L4[k])
        out["gain"][k] = np.linalg.norm(M @ th[k] - W)
        out["affine"][k] = np.linalg.norm(M @ ph[k] - w)
        out["sg"][k] = range_inclusion(W, M, rtol=rtol).slack
        out["sa"][k] = range_inclusion(w, M, rtol=rtol).slack
        out["margin"][k] = psd_margin(M)
        free[k] = p.m - pinv(M, rtol).rank
    return out["gain"], out["affine"], out["sg"], out["sa"], free, out["margin"]


def margin_path(problem: CoefficientSet, P1: np.ndarray) -> np.ndarray:
    """``min eig(R_agg - D' P1 D)`` at every node."""
    Rn = problem.R + problem.R_tilde
    D = problem.D
    return np.array([psd_margin(Rn[k] - D[k].T @ P1[k] @ D[k]) for k in range(problem.N + 1)])


# ---------------------------------------------------------------------------
# representation kernel


def solve_rep_kernel(problem: CoefficientSet, strategy: StrategyPair) -> KernelSolution:
    """Integrate the representation kernel with ``(theta2, phi)`` frozen to ``strategy``."""
    f = _frozen(rep_drift(problem), strategy, problem.grid)
    path = integrate_backward(f, _terminal(problem), problem.grid)
    return KernelSolution.from_path(path, problem.n, "closed_rep", problem.grid)


def rep_first_order_residual(problem: CoefficientSet, strategy: StrategyPair, kernel: KernelSolution) -> np.ndarray:
    """Node-wise norm of both stationarity identities (stacked)."""
    gain, affine, *_ = stationarity_residuals(problem, strategy, kernel)
    return np.hypot(gain, affine)


def evaluate_rep(
    problem: CoefficientSet, strategy: StrategyPair, kernel: KernelSolution | None = None, tol: Tolerances = Tolerances()
) -> EquilibriumReport:
    """Report for a candidate representation.

    The second-order margin uses the u-free P1 of the open-loop kernel, not
    the representation kernel.
    """
    if kernel is None:
        kernel = solve_rep_kernel(problem, strategy)
    gain, affine, sg, sa, free, _ = stationarity_residuals(problem, strategy, kernel, tol.rtol)
    margin = margin_path(problem, solve_open_p1(problem))
    return EquilibriumReport(
        kind="open_rep",
        times=problem.grid.nodes,
        second_order_margin=margin,
        first_order_residual=np.hypot(gain, affine),
        range_slack_gain=sg,
        range_slack_affine=sa,
        free_dim=free,
        tolerances=tol,
    )


def synthesize_rep(problem: CoefficientSet, tol: Tolerances = Tolerances()):
    """Backward synthesis of the representation pair.

    Returns
    -------
    strategy : StrategyPair
    kernel : KernelSolution (variant ``closed_rep``)
    report : EquilibriumReport
    """
    path, controls = integrate_backward_coupled(
        rep_drift(problem), _pair_feedback(problem, tol.rtol), _terminal(problem), problem.grid
    )
    kernel = KernelSolution.from_path(path, problem.n, "closed_rep", problem.grid)
    strategy = StrategyPair.from_controls(problem.grid, controls, "open_rep")
    return strategy, kernel, evaluate_rep(problem, strategy, kernel, tol)
