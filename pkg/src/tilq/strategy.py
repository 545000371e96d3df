"""Closed-loop equilibrium strategies.

Here the perturbed state re-enters the feedback, so the gain appears inside
the closed-loop coefficients ``A + B theta`` and ``C + D theta`` of the
strategy kernel. That kernel's drift preserves symmetry of ``P1`` and ``P2``;
the sweep re-symmetrizes after every step and records the correction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import KernelSolution, integrate_backward, integrate_backward_coupled, strategy_drift
from .linalg import Tolerances
from .problem import CoefficientSet
from .representation import (
    EquilibriumReport,
    StrategyPair,
    _frozen,
    _pair_feedback,
    _terminal,
    stationarity_residuals,
    synthesize_rep,
)

__all__ = [
    "SymmetryError",
    "solve_strategy_kernel",
    "synthesize_strategy",
    "evaluate_strategy",
    "compare_rep_vs_strategy",
    "Divergence",
]


class SymmetryError(ArithmeticError):
    """Per-step symmetry drift too large to be round-off."""


def _symmetrizer(n: int, sym_tol: float):
    nn = n * n
    state = {"max": 0.0}

    def post(y):
        y = y.copy()
        for lo in (0, nn):
            P = y[lo : lo + nn].reshape(n, n)
            skew = 0.5 * (P - P.T)
            size = float(np.linalg.norm(skew))
            if size > sym_tol * (1.0 + np.linalg.norm(P)):
                raise SymmetryError(f"symmetry correction {size:.3e} exceeds {sym_tol:g}")
            state["max"] = max(state["max"], size)
            y[lo : lo + nn] = (P - skew).ravel()
        return y

    return post, state


def solve_strategy_kernel(problem: CoefficientSet, strategy: StrategyPair, tol: Tolerances = Tolerances()) -> KernelSolution:
    """Integrate the strategy kernel with ``(theta1, phi)`` frozen to ``strategy``."""
    post, state = _symmetrizer(problem.n, tol.sym)
    f = _frozen(strategy_drift(problem), strategy, problem.grid)
    path = integrate_backward(f, _terminal(problem), problem.grid, post_step=post)
    return KernelSolution.from_path(path, problem.n, "closed_strategy", problem.grid, state["max"])


def evaluate_strategy(
    problem: CoefficientSet, strategy: StrategyPair, kernel: KernelSolution | None = None, tol: Tolerances = Tolerances()
) -> EquilibriumReport:
    """Report for a candidate closed-loop strategy.

    Unlike the representation report, the second-order margin here uses the
    strategy kernel's own ``P1``.
    """
    if kernel is None:
        kernel = solve_strategy_kernel(problem, strategy, tol)
    gain, affine, sg, sa, free, margin = stationarity_residuals(problem, strategy, kernel, tol.rtol)
    return EquilibriumReport(
        kind="closed_strategy",
        times=problem.grid.nodes,
        second_order_margin=margin,
        first_order_residual=np.hypot(gain, affine),
        range_slack_gain=sg,
        range_slack_affine=sa,
        free_dim=free,
        tolerances=tol,
        extra={"symmetry_correction": kernel.symmetry_correction},
    )


def synthesize_strategy(problem: CoefficientSet, tol: Tolerances = Tolerances()):
    """Backward synthesis of the closed-loop equilibrium strategy.

    Returns ``(strategy, kernel, report)``.
    """
    post, state = _symmetrizer(problem.n, tol.sym)
    path, controls = integrate_backward_coupled(
        strategy_drift(problem), _pair_feedback(problem, tol.rtol), _terminal(problem), problem.grid, post_step=post
    )
    kernel = KernelSolution.from_path(path, problem.n, "closed_strategy", problem.grid, state["max"])
    strategy = StrategyPair.from_controls(problem.grid, controls, "closed_strategy")
    return strategy, kernel, evaluate_strategy(problem, strategy, kernel, tol)


@dataclass(frozen=True)
class Divergence:
    """Node-wise differences between the two feedback notions."""

    times: np.ndarray
    kernel_gap: np.ndarray  # |P1_rep - P1_strat|, max-entry norm
    gain_gap: np.ndarray  # |theta_rep - theta_strat|, max-entry norm
    rep_asymmetry: np.ndarray  # |P1_rep - P1_rep'|
    strategy_asymmetry: np.ndarray
    rep_report: EquilibriumReport
    strategy_report: EquilibriumReport

    def summary(self) -> dict:
        return {
            "max_kernel_gap": float(np.max(self.kernel_gap)),
            "max_gain_gap": float(np.max(self.gain_gap)),
            "max_rep_asymmetry": float(np.max(self.rep_asymmetry)),
            "max_strategy_asymmetry": float(np.max(self.strategy_asymmetry)),
        }


def _maxabs(X: np.ndarray) -> np.ndarray:
    return np.max(np.abs(X.reshape(X.shape[0], -1)), axis=1)


def compare_rep_vs_strategy(problem: CoefficientSet, tol: Tolerances = Tolerances()) -> Divergence:
    rep, rk, rrep = synthesize_rep(problem, tol)
    strat, sk, srep = synthesize_strategy(problem, tol)
    return Divergence(
        times=problem.grid.nodes,
        kernel_gap=_maxabs(rk.P1 - sk.P1),
        gain_gap=_maxabs(rep.theta - strat.theta),
        rep_asymmetry=_maxabs(rk.P1 - np.swapaxes(rk.P1, 1, 2)),
        strategy_asymmetry=_maxabs(sk.P1 - np.swapaxes(sk.P1, 1, 2)),
        rep_report=rrep,
        strategy_report=srep,
    )
