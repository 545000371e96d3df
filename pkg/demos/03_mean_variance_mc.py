"""
Checking an equilibrium by simulation
=====================================

A mean-variance portfolio: one risky asset, terminal cost
``2 Var(X_T) - E X_T``. We synthesize the closed-loop strategy, then perturb
its control on short windows and estimate the cost change by Monte Carlo
with common random numbers. For an equilibrium the difference quotients
should not be significantly negative; a deliberately corrupted gain should
produce clearly negative ones.

The budget here is small so the script runs in seconds; the acceptance
suite uses 4096 x 256 paths.
"""

import numpy as np

from tilq import MCParams, PerturbationProbe, perturbation_quotients, synthesize_strategy, validate

problem = validate(
    {"n": 1, "m": 1, "T": 1.0, "N": 100, "A": 0.05, "B": 0.3, "D": 0.5, "G": 2.0, "G_tilde": -2.0, "g": -1.0, "x0": 10.0}
)
strategy, _, report = synthesize_strategy(problem)
print("algebraic verdict:", report.verdict)
print("gain range:", strategy.theta.min(), strategy.theta.max())
print("phi at t=0:", strategy.phi[0, 0])

h = problem.grid.h
probes = [PerturbationProbe(t, (v,), (2 * h, 4 * h, 8 * h)) for t in (0.0, 0.25, 0.5) for v in (1.0, -1.0)]
mc = MCParams(base_seed=1, outer=256, inner=64)

# %%
# Quotients for the synthesized strategy.
table = perturbation_quotients(problem, strategy, probes, mc)
for r in table.rows:
    print(f"t={r.t:.2f} v={r.v[0]:+.0f} eps={r.eps:.2f}  q={r.quotient:+.4f} +- {r.stderr:.4f}")
print("simulation verdict:", table.verdict)

# %%
# A gain shifted by 0.2 is no longer an equilibrium.
bad = perturbation_quotients(problem, strategy.with_theta(strategy.theta_half + 0.2), probes, mc)
worst = min(bad.rows, key=lambda r: r.quotient / r.stderr)
print(f"corrupted: verdict {bad.verdict}, worst quotient {worst.quotient:+.3f} ({worst.quotient / worst.stderr:.0f} stderr)")
print("number of rows below -3 stderr:", len(bad.violations()))
