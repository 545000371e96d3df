"""Equilibrium controls for time-inconsistent stochastic linear-quadratic problems.

Backward kernel solvers for open-loop equilibrium controls, their closed-loop
representations and closed-loop equilibrium strategies, algebraic checks of
the equilibrium conditions, and Monte Carlo verification of the underlying
perturbation definitions.
"""

from .classical import classical_riccati_oracle, hamiltonian_lqr, scalar_riccati
from .kernels import (
    AdjointPair,
    BlowUpError,
    GenericBackwardSpec,
    KernelSolution,
    decoupling_residual,
    integrate_backward,
    mixed_spec,
    solve_generic_kernel,
    solve_open_kernel,
)
from .linalg import Tolerances, pinv, psd_margin, range_inclusion, solve_affine
from .montecarlo import (
    MCParams,
    PerturbationProbe,
    decompose_variation,
    deviation_estimate,
    estimate_cost,
    perturbation_quotient,
    perturbation_quotients,
    simulate,
)
from .openloop import check_open, second_order_condition
from .problem import (
    AggregateNotation,
    CoefficientSet,
    FeedbackControl,
    ProblemError,
    TimeGrid,
    aggregates,
    load_problem,
    sample,
    validate,
)
from .representation import EquilibriumReport, StrategyPair, rep_first_order_residual, solve_rep_kernel, synthesize_rep
from .strategy import compare_rep_vs_strategy, solve_strategy_kernel, synthesize_strategy

__version__ = "0.1.0"

__all__ = [
    "AdjointPair",
    "AggregateNotation",
    "BlowUpError",
    "CoefficientSet",
    "EquilibriumReport",
    "FeedbackControl",
    "GenericBackwardSpec",
    "KernelSolution",
    "MCParams",
    "PerturbationProbe",
    "ProblemError",
    "StrategyPair",
    "TimeGrid",
    "Tolerances",
    "aggregates",
    "check_open",
    "classical_riccati_oracle",
    "compare_rep_vs_strategy",
    "decompose_variation",
    "decoupling_residual",
    "deviation_estimate",
    "estimate_cost",
    "hamiltonian_lqr",
    "integrate_backward",
    "load_problem",
    "mixed_spec",
    "perturbation_quotient",
    "perturbation_quotients",
    "pinv",
    "psd_margin",
    "range_inclusion",
    "rep_first_order_residual",
    "sample",
    "scalar_riccati",
    "second_order_condition",
    "simulate",
    "solve_affine",
    "solve_generic_kernel",
    "solve_open_kernel",
    "solve_rep_kernel",
    "solve_strategy_kernel",
    "synthesize_rep",
    "synthesize_strategy",
    "validate",
]
