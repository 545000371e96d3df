"""Dense linear algebra used by the equilibrium conditions.

Pseudo-inverses are taken through the SVD with a relative singular-value
cutoff, so rank-deficient weight matrices are handled without special cases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "PinvResult",
    "RangeCheck",
    "AffineSolve",
    "Tolerances",
    "pinv",
    "psd_margin",
    "range_inclusion",
    "solve_affine",
]


@dataclass(frozen=True)
class Tolerances:
    """Numerical thresholds shared by the solvers and verdicts."""

    rtol: float = 1e-10  # pseudo-inverse cutoff, relative to largest singular value
    psd: float = 1e-8
    res: float = 1e-6
    range: float = 1e-8
    sym: float = 1e-6


@dataclass(frozen=True)
class PinvResult:
    pinv: np.ndarray
    rank: int
    cutoff: float


@dataclass(frozen=True)
class RangeCheck:
    contained: bool
    slack: float


@dataclass(frozen=True)
class AffineSolve:
    x: np.ndarray
    residual: float
    rank: int


def _finite(M: np.ndarray, what: str) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise np.linalg.LinAlgError(f"{what}: matrix has non-finite entries")
    return M


def pinv(M, rtol: float = 1e-10) -> PinvResult:
    """Moore-Penrose pseudo-inverse with cutoff ``rtol * s_max``."""
    if rtol <= 0:
        raise ValueError("rtol must be positive")
    M = _finite(M, "pinv")
    if M.ndim != 2:
        raise ValueError(f"pinv expects a 2-D matrix, got shape {M.shape}")
    if M.size == 0:
        return PinvResult(np.zeros(M.shape[::-1]), 0, 0.0)
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    cutoff = rtol * s[0] if s.size else 0.0
    keep = s > cutoff
    rank = int(np.count_nonzero(keep))
    inv_s = np.zeros_like(s)
    inv_s[keep] = 1.0 / s[keep]
    return PinvResult((Vt.T * inv_s) @ U.T, rank, float(cutoff))


def psd_margin(M) -> float:
    """Smallest eigenvalue of the symmetric part of ``M``."""
    M = _finite(M, "psd_margin")
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"psd_margin expects a square matrix, got shape {M.shape}")
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])


def range_inclusion(W, M, tol: float = 1e-8, rtol: float = 1e-10) -> RangeCheck:
    """Test whether the columns of ``W`` (or the vector ``W``) lie in range(M).

    The slack is ``|(I - M M^+) W|_F / (1 + |W|_F)``.
    """
    M = _finite(M, "range_inclusion")
    W = _finite(W, "range_inclusion")
    if W.shape[0] != M.shape[0]:
        raise ValueError(f"row mismatch: W has {W.shape[0]} rows, M has {M.shape[0]}")
    P = M @ pinv(M, rtol).pinv
    resid = W - P @ W
    slack = float(np.linalg.norm(resid) / (1.0 + np.linalg.norm(W)))
    return RangeCheck(slack <= tol, slack)


def solve_affine(M, rhs, rtol: float = 1e-10) -> AffineSolve:
    """Minimum-norm least-squares solution ``M^+ rhs``.

    An inconsistent system is not an error; its residual ``|M x - rhs|`` is
    returned for the caller to judge.
    """
    M = _finite(M, "solve_affine")
    rhs = _finite(rhs, "solve_affine")
    if rhs.shape[0] != M.shape[0]:
        raise ValueError(f"rhs has {rhs.shape[0]} rows, M has {M.shape[0]}")
    pr = pinv(M, rtol)
    x = pr.pinv @ rhs
    return AffineSolve(x, float(np.linalg.norm(M @ x - rhs)), pr.rank)
