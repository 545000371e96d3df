"""
When the two feedback notions part ways
=======================================

Adding a terminal penalty on the conditional mean, ``G_tilde = diag(1, 0)``,
makes the problem time inconsistent. The representation of the open-loop
equilibrium and the closed-loop equilibrium strategy now differ, and the
representation kernel loses its symmetry.
"""

import numpy as np

from tilq import compare_rep_vs_strategy, validate

rng = np.random.default_rng(3)
M = 0.6 * rng.normal(size=(2, 2))
A = M - (np.max(np.linalg.eigvals(M).real) + 0.5) * np.eye(2)

problem = validate(
    {
        "n": 2,
        "m": 2,
        "T": 1.0,
        "N": 200,
        "A": A.tolist(),
        "B": rng.normal(size=(2, 2)).tolist(),
        "C": (0.4 * rng.normal(size=(2, 2))).tolist(),
        "D": (0.4 * rng.normal(size=(2, 2))).tolist(),
        "Q": np.eye(2).tolist(),
        "R": np.eye(2).tolist(),
        "G": np.eye(2).tolist(),
        "G_tilde": [[1.0, 0.0], [0.0, 0.0]],
        "x0": [1.0, -0.5],
    }
)

div = compare_rep_vs_strategy(problem)
for key, val in div.summary().items():
    print(f"{key:>24}: {val:.3e}")

# %%
# Gaps grow backward from the terminal time, where both kernels start at -G.
for k in (0, problem.N // 2, problem.N):
    print(f"t={div.times[k]:.2f}  kernel gap {div.kernel_gap[k]:.3e}  gain gap {div.gain_gap[k]:.3e}")

# %%
# Both candidates still pass their own algebraic checks.
print("representation verdict:", div.rep_report.verdict)
print("strategy verdict      :", div.strategy_report.verdict)
