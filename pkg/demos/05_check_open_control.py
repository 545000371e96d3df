"""
Checking a deterministic open-loop control
==========================================

``check_open`` tests a given control path against both equilibrium
conditions. We feed it the control induced by the synthesized closed-loop
representation, and then the zero control for contrast.
"""

import numpy as np

from tilq import check_open, synthesize_rep, validate
from tilq.openloop import induced_control

problem = validate(
    {"n": 1, "m": 1, "T": 1.0, "N": 200, "A": 0.05, "B": 0.3, "D": 0.5, "G": 2.0, "G_tilde": -2.0, "g": -1.0, "x0": 10.0}
)
rep, _, _ = synthesize_rep(problem)
u = induced_control(problem, rep)

report = check_open(problem, u)
print("induced control:", report.summary()["verdict"], f"max residual {report.first_order_residual.max():.2e}")
print("pathwise sample:", report.extra["sampled_pathwise_check"]["max_residual_quantiles"])

zero = check_open(problem, np.zeros((problem.N + 1, 1)))
print("zero control   :", zero.verdict, f"max residual {zero.first_order_residual.max():.2e}")
