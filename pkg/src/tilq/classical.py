"""Classical (time-consistent) reference solutions used as oracles.

These are the textbook objects of stochastic LQ theory, written in their own
sign convention (value ``V = 1/2 x' P x`` with ``P(T) = G``) and with their
own formulas, so that they check the equilibrium solvers rather than echo
them. The equilibrium kernels relate to them by ``P1 = -P``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .kernels import integrate_backward
from .problem import CoefficientSet

__all__ = [
    "ClassicalSolution",
    "classical_riccati_oracle",
    "classical_second_order_adjoint",
    "hamiltonian_lqr",
    "scalar_riccati",
]


@dataclass(frozen=True)
class ClassicalSolution:
    P: np.ndarray  # (N+1, n, n), value kernel
    gain: np.ndarray  # (N+1, m, n), optimal feedback u = gain X + ...


def classical_riccati_oracle(problem: CoefficientSet) -> ClassicalSolution:
    """Stochastic Riccati equation of the time-consistent problem.

        -dP/ds = P A + A'P + C'P C + Q - (P B + C'P D + S')(R + D'P D)^{-1}(B'P + D'P C + S)
        P(T) = G,   gain = -(R + D'P D)^{-1}(B'P + D'P C + S)

    Raises ``ValueError`` when any conditional-expectation weight is nonzero.
    """
    if problem.has_tildes:
        raise ValueError("classical oracle needs Q_tilde = S_tilde = R_tilde = 0 and G_tilde = 0")
    hc, grid = problem.half, problem.grid

    def rhs(s, P):
        j = grid.half_index(s)
        A, B, C, D = hc.A[j], hc.B[j], hc.C[j], hc.D[j]
        L = P @ B + C.T @ P @ D + hc.S[j].T
        K = np.linalg.solve(hc.R[j] + D.T @ P @ D, L.T)
        return -(P @ A + A.T @ P + C.T @ P @ C + hc.Q[j] - L @ K)

    P = integrate_backward(rhs, problem.G, grid)
    p = problem
    gain = np.stack(
        [
            -np.linalg.solve(p.R[k] + p.D[k].T @ P[k] @ p.D[k], p.B[k].T @ P[k] + p.D[k].T @ P[k] @ p.C[k] + p.S[k])
            for k in range(p.N + 1)
        ]
    )
    return ClassicalSolution(P, gain)


def classical_second_order_adjoint(problem: CoefficientSet) -> np.ndarray:
    """Second-order adjoint ``-dP/ds = A'P + P A + C'P C + Q``, ``P(T) = G``."""
    hc, grid = problem.half, problem.grid

    def rhs(s, P):
        j = grid.half_index(s)
        A, C = hc.A[j], hc.C[j]
        return -(A.T @ P + P @ A + C.T @ P @ C + hc.Q[j])

    return integrate_backward(rhs, problem.G, grid)


def hamiltonian_lqr(A, B, Q, R, G, T: float, times) -> np.ndarray:
    """Deterministic LQR Riccati solution via the Hamiltonian matrix exponential.

    For constant coefficients, ``[X; L](s) = expm(H (s - T)) [I; G]`` with
    ``H = [[A, -B R^{-1} B'], [-Q, -A']]`` and ``P(s) = L X^{-1}``.
    """
    A, B, Q, R, G = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, Q, R, G))
    n = A.shape[0]
    H = np.block([[A, -B @ np.linalg.solve(R, B.T)], [-Q, -A.T]])
    top = np.vstack([np.eye(n), G])
    out = []
    for s in np.atleast_1d(times):
        XL = expm(H * (s - T)) @ top
        out.append(np.linalg.solve(XL[:n].T, XL[n:].T).T)
    return np.array(out)


def scalar_riccati(a: float, b: float, q: float, r: float, g: float, T: float, s):
    """Closed form of ``P' + 2aP + q - b^2 P^2 / r = 0``, ``P(T) = g``.

    The two equilibria are ``P+- = (a +- d) r / b^2`` with
    ``d = sqrt(a^2 + b^2 q / r)``; the solution relaxes from ``g`` towards
    ``P+`` backward in time at rate ``2d``.
    """
    s = np.asarray(s, dtype=float)
    if b == 0:
        # linear case: P' = -2aP - q
        if a == 0:
            return g + q * (T - s)
        e = np.exp(2 * a * (T - s))
        return g * e + q * (e - 1) / (2 * a)
    d = np.sqrt(a * a + b * b * q / r)
    p_plus = (a + d) * r / (b * b)
    p_minus = (a - d) * r / (b * b)
    if g == p_minus:
        return np.full_like(s, p_minus)
    K = (g - p_plus) / (g - p_minus)
    e = K * np.exp(-2 * d * (T - s))
    return (p_plus - p_minus * e) / (1 - e)
