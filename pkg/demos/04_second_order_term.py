"""
The second-order term of a spike perturbation
=============================================

With ``D = 1`` a control spike of size ``v`` on ``[t, t + eps]`` injects
noise into the state, so the cost change has a second-order part of size
``eps``. We split the simulated cost difference into its first-order,
second-order and cross terms and compare the second-order part with its
kernel prediction ``-(eps/2) v' D' Pbar1 D v``.
"""

import numpy as np

from tilq import MCParams, PerturbationProbe, decompose_variation, validate
from tilq.montecarlo import j2_prediction

problem = validate(
    {"n": 1, "m": 1, "T": 1.0, "N": 200, "x0": 1.0, "D": 1.0, "B": 0.5, "Q": 0.5, "G": 1.0, "G_tilde": -0.5, "Q_tilde": 0.2, "R": 1.0}
)
zero = np.zeros((problem.N + 1, 1, 1))
phi = np.zeros((problem.N + 1, 1))
h = problem.grid.h
probe = PerturbationProbe(0.0, (1.0,), tuple(k * h for k in (2, 4, 8, 16)))

dec = decompose_variation(problem, zero, zero, phi, probe, MCParams(base_seed=3, outer=512, inner=64))
print(" eps     direct      J1        J2       cross    |error|")
for i, e in enumerate(dec.epsilons):
    print(f"{e:.2f}  {dec.direct[i]:+.5f}  {dec.J1[i]:+.5f}  {dec.J2[i]:+.5f}  {dec.cross[i]:+.5f}  {dec.error[i]:.1e}")

# %%
# Extrapolate J2 / eps to eps = 0 and compare with the kernel value.
slope, intercept = np.polyfit(dec.epsilons, dec.J2 / dec.epsilons, 1)
print(f"J2/eps at eps -> 0: {intercept:.4f}   prediction: {j2_prediction(problem, None, 0.0, [1.0], 1.0):.4f}")
