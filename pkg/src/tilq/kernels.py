"""Backward kernel systems and their RK4 integration.

Every kernel system here has the shape ``dP = -[...] ds`` with a terminal
condition at ``T``. With deterministic ``b``, ``sigma`` and deterministic
affine terms the martingale parts ``L3``, ``L4`` vanish, so each system is a
backward ODE for ``(P1, P2, P3, P4)``: two ``n x n`` matrices, two n-vectors.

The three systems for open-loop controls, closed-loop representations and
closed-loop strategies are coded separately, each as written in its own
characterization, so that their reductions to one another can be checked
rather than assumed. The generic decoupling system covers all of them through
:func:`mixed_spec`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .problem import CoefficientSet, FeedbackControl, TimeGrid, to_half

__all__ = [
    "BlowUpError",
    "BLOWUP_LIMIT",
    "KernelSolution",
    "GenericBackwardSpec",
    "AdjointPair",
    "DecouplingResidual",
    "integrate_backward",
    "integrate_backward_coupled",
    "integrate_forward",
    "solve_open_kernel",
    "solve_open_p1",
    "solve_generic_kernel",
    "solve_mixed_kernel",
    "mixed_spec",
    "open_spec",
    "decoupling_residual",
    "pack",
    "unpack",
    "rep_drift",
    "strategy_drift",
    "solve_pbar1",
]

BLOWUP_LIMIT = 1e12


class BlowUpError(ArithmeticError):
    """The backward sweep left the finite range (Riccati-type explosion)."""

    def __init__(self, node: int, time: float, norm: float):
        self.node = node
        self.time = time
        super().__init__(f"backward sweep blew up at node {node} (t={time:.6g}, |P|={norm:.3g})")


def _check(y: np.ndarray, k: int, grid: TimeGrid) -> None:
    norm = float(np.max(np.abs(y))) if y.size else 0.0
    if not np.isfinite(norm) or norm > BLOWUP_LIMIT:
        raise BlowUpError(k, grid.nodes[k], norm)


def _rk4_back(f: Callable, ts: np.ndarray, j: int, y: np.ndarray, h: float) -> np.ndarray:
    """One backward RK4 step from half-grid index ``j`` (a node) to ``j - 2``."""
    k1 = f(ts[j], y)
    k2 = f(ts[j - 1], y - 0.5 * h * k1)
    k3 = f(ts[j - 1], y - 0.5 * h * k2)
    k4 = f(ts[j - 2], y - h * k3)
    return y - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_backward(rhs, terminal, grid: TimeGrid, post_step=None) -> np.ndarray:
    """Classical RK4 sweep of ``dy/ds = rhs(s, y)`` from ``T`` down to ``0``.

    ``rhs`` is evaluated only at nodes and interval midpoints, with ``s`` taken
    from ``grid.half_nodes``. ``post_step(y)`` may return a corrected state
    after every step. Returns node values, shape ``(N+1,) + terminal.shape``.
    """
    y = np.array(terminal, dtype=float)
    _check(y, grid.N, grid)
    out = np.empty((grid.N + 1,) + y.shape)
    out[grid.N] = y
    ts, h = grid.half_nodes, grid.h
    for k in range(grid.N - 1, -1, -1):
        y = _rk4_back(rhs, ts, 2 * k + 2, y, h)
        if post_step is not None:
            y = post_step(y)
        _check(y, k, grid)
        out[k] = y
    return out


def integrate_backward_coupled(rhs, feedback, terminal, grid: TimeGrid, post_step=None):
    """Backward sweep of ``dy/ds = rhs(s, y, c)`` with ``c = feedback(s, y)``.

    Each step first takes a fully coupled RK4 predictor step (feedback
    re-evaluated at every stage), forms the midpoint state by cubic Hermite
    interpolation, and evaluates the feedback at the step's right end, midpoint
    and predicted left end. The accepted step is then an RK4 step with the
    feedback frozen at those three samples. The scheme is fourth order, and the
    stored half-grid feedback samples reproduce the sweep exactly when fed
    back into a frozen-feedback integration.

    Returns
    -------
    path : ndarray, node values of ``y``
    controls : list of length ``2N + 1``, feedback samples on the half grid
    """
    y = np.array(terminal, dtype=float)
    _check(y, grid.N, grid)
    N, ts, h = grid.N, grid.half_nodes, grid.h
    out = np.empty((N + 1,) + y.shape)
    out[N] = y
    controls = [None] * (2 * N + 1)
    controls[2 * N] = feedback(ts[2 * N], y)

    def coupled(s, x):
        return rhs(s, x, feedback(s, x))

    for k in range(N - 1, -1, -1):
        j = 2 * k + 2
        y_pred = _rk4_back(coupled, ts, j, y, h)
        c_left = feedback(ts[j - 2], y_pred)
        f_right = rhs(ts[j], y, controls[j])
        f_left = rhs(ts[j - 2], y_pred, c_left)
        y_mid = 0.5 * (y + y_pred) + (h / 8.0) * (f_left - f_right)
        c_mid = feedback(ts[j - 1], y_mid)
        frozen = {j: controls[j], j - 1: c_mid, j - 2: c_left}

        def stage(s, x, _frozen=frozen):
            return rhs(s, x, _frozen[grid.half_index(s)])

        y = _rk4_back(stage, ts, j, y, h)
        if post_step is not None:
            y = post_step(y)
        _check(y, k, grid)
        out[k] = y
        controls[j - 1] = c_mid
        controls[j - 2] = c_left
    return out, controls


def integrate_forward(rhs, initial, grid: TimeGrid, k0: int = 0) -> np.ndarray:
    """RK4 sweep of ``dy/ds = rhs(s, y)`` forward from node ``k0`` to ``N``."""
    y = np.array(initial, dtype=float)
    out = np.empty((grid.N + 1 - k0,) + y.shape)
    out[0] = y
    ts, h = grid.half_nodes, grid.h
    for k in range(k0, grid.N):
        j = 2 * k
        k1 = rhs(ts[j], y)
        k2 = rhs(ts[j + 1], y + 0.5 * h * k1)
        k3 = rhs(ts[j + 1], y + 0.5 * h * k2)
        k4 = rhs(ts[j + 2], y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k + 1 - k0] = y
    return out


def pack(P1, P2, P3, P4) -> np.ndarray:
    return np.concatenate([P1.ravel(), P2.ravel(), P3.ravel(), P4.ravel()])


def unpack(y: np.ndarray, n: int):
    nn = n * n
    return (
        y[:nn].reshape(n, n),
        y[nn : 2 * nn].reshape(n, n),
        y[2 * nn : 2 * nn + n],
        y[2 * nn + n :],
    )


@dataclass(frozen=True, eq=False)
class KernelSolution:
    """Node paths of a kernel system. ``L3``, ``L4`` are identically zero."""

    P1: np.ndarray  # (N+1, n, n)
    P2: np.ndarray  # (N+1, n, n)
    P3: np.ndarray  # (N+1, n)
    P4: np.ndarray  # (N+1, n)
    L3: np.ndarray
    L4: np.ndarray
    variant: str  # open | closed_rep | closed_strategy | generic
    grid: TimeGrid
    symmetry_correction: float = 0.0

    @classmethod
    def from_path(cls, path: np.ndarray, n: int, variant: str, grid: TimeGrid, symmetry_correction=0.0):
        nn = n * n
        P1 = path[:, :nn].reshape(-1, n, n)
        P2 = path[:, nn : 2 * nn].reshape(-1, n, n)
        P3 = path[:, 2 * nn : 2 * nn + n]
        P4 = path[:, 2 * nn + n :]
        zeros = np.zeros_like(P3)
        return cls(P1, P2, P3, P4, zeros, zeros.copy(), variant, grid, symmetry_correction)

    def terminal_state(self) -> np.ndarray:
        return pack(self.P1[-1], self.P2[-1], self.P3[-1], self.P4[-1])


# ---------------------------------------------------------------------------
# open-loop system: P1, P2 free of the control; P3, P4 driven by u


def _open_drift(problem: CoefficientSet, u_half: np.ndarray):
    hc, n = problem.half, problem.n
    grid = problem.grid

    def f(s, y):
        j = grid.half_index(s)
        P1, P2, P3, P4 = unpack(y, n)
        A, B, C, D = hc.A[j], hc.B[j], hc.C[j], hc.D[j]
        u = u_half[j]
        d1 = -(P1 @ A + A.T @ P1 + C.T @ P1 @ C - hc.Q[j])
        d2 = -(P2 @ A + A.T @ P2 - hc.Q_tilde[j])
        d3 = -(A.T @ P3 + P2 @ hc.b[j] + (P2 @ B - hc.S_tilde[j].T) @ u)
        d4 = -(
            A.T @ P4
            + C.T @ P1 @ hc.sigma[j]
            + P1 @ hc.b[j]
            + (C.T @ P1 @ D + P1 @ B - hc.S[j].T) @ u
        )
        return pack(d1, d2, d3, d4)

    return f


def _terminal(problem: CoefficientSet) -> np.ndarray:
    return pack(-problem.G, -problem.G_tilde, np.zeros(problem.n), -problem.g)


def solve_open_kernel(problem: CoefficientSet, u) -> KernelSolution:
    """Integrate the open-loop kernel system for a deterministic control ``u``.

    ``u`` is an array of node samples ``(N+1, m)`` or half-grid samples
    ``(2N+1, m)``. A :class:`FeedbackControl` is rejected: feedback
    candidates need the closed-loop-representation kernel.
    """
    if isinstance(u, FeedbackControl) or hasattr(u, "feedback"):
        raise TypeError("solve_open_kernel takes a deterministic control path; use solve_rep_kernel for feedback")
    u_half = to_half(np.asarray(u, dtype=float).reshape(-1, problem.m), problem.grid)
    path = integrate_backward(_open_drift(problem, u_half), _terminal(problem), problem.grid)
    return KernelSolution.from_path(path, problem.n, "open", problem.grid)


def solve_open_p1(problem: CoefficientSet) -> np.ndarray:
    """Only the first equation of the open-loop system (the u-free P1)."""
    hc, grid = problem.half, problem.grid

    def f(s, y):
        j = grid.half_index(s)
        A, C = hc.A[j], hc.C[j]
        return -(y @ A + A.T @ y + C.T @ y @ C - hc.Q[j])

    return integrate_backward(f, -problem.G, grid)


# ---------------------------------------------------------------------------
# closed-loop representation and closed-loop strategy drifts; the control
# argument ``c`` is a pair (theta, phi) valid at the evaluation time


def rep_drift(problem: CoefficientSet):
    hc, n, grid = problem.half, problem.n, problem.grid

    def f(s, y, c):
        j = grid.half_index(s)
        theta, phi = c
        P1, P2, P3, P4 = unpack(y, n)
        A, B, C, D = hc.A[j], hc.B[j], hc.C[j], hc.D[j]
        d1 = -(P1 @ A + A.T @ P1 + C.T @ P1 @ C + (P1 @ B + C.T @ P1 @ D - hc.S[j].T) @ theta - hc.Q[j])
        d2 = -(P2 @ A + A.T @ P2 - hc.Q_tilde[j] + (P2 @ B - hc.S_tilde[j].T) @ theta)
        d3 = -(A.T @ P3 + (P2 @ B - hc.S_tilde[j].T) @ phi + P2 @ hc.b[j])
        d4 = -(
            A.T @ P4
            + C.T @ P1 @ hc.sigma[j]
            + (C.T @ P1 @ D + P1 @ B - hc.S[j].T) @ phi
            + P1 @ hc.b[j]
        )
        return pack(d1, d2, d3, d4)

    return f


def strategy_drift(problem: CoefficientSet):
    hc, n, grid = problem.half, problem.n, problem.grid

    def f(s, y, c):
        j = grid.half_index(s)
        theta, phi = c
        P1, P2, P3, P4 = unpack(y, n)
        B, D, S, R = hc.B[j], hc.D[j], hc.S[j], hc.R[j]
        St, Rt = hc.S_tilde[j], hc.R_tilde[j]
        Ath = hc.A[j] + B @ theta
        Cth = hc.C[j] + D @ theta
        d1 = -(
            P1 @ Ath
            + Ath.T @ P1
            + Cth.T @ P1 @ Cth
            - (hc.Q[j] + theta.T @ S + theta.T @ R @ theta + S.T @ theta)
        )
        d2 = -(P2 @ Ath + Ath.T @ P2 - (hc.Q_tilde[j] + theta.T @ St + theta.T @ Rt @ theta + St.T @ theta))
        d3 = -(Ath.T @ P3 + P2 @ hc.b[j] + (P2 @ B - St.T - theta.T @ Rt) @ phi)
        d4 = -(
            Ath.T @ P4
            + Cth.T @ P1 @ (D @ phi + hc.sigma[j])
            + P1 @ (B @ phi + hc.b[j])
            - (S.T + theta.T @ R) @ phi
        )
        return pack(d1, d2, d3, d4)

    return f


# ---------------------------------------------------------------------------
# generic decoupling system


_GENERIC_MATS = ("A1", "B1", "C1", "C2", "C3", "C4")
_GENERIC_VECS = ("A2", "B2", "C5", "C6")


@dataclass(frozen=True, eq=False)
class GenericBackwardSpec:
    """Coefficients of the forward-backward pair

        dX = (A1 X + A2) dr + (B1 X + B2) dW
        dY = -(C1 Y + C2 Z + C3 X + C4 E_t X + C5 + E_t C6) dr + Z dW
        Y(T) = D1 X(T) + D2 E_t X(T) + D3

    Path fields are half-grid samples ``(2N+1, ...)``.
    """

    grid: TimeGrid
    A1: np.ndarray
    B1: np.ndarray
    C1: np.ndarray
    C2: np.ndarray
    C3: np.ndarray
    C4: np.ndarray
    A2: np.ndarray
    B2: np.ndarray
    C5: np.ndarray
    C6: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    D3: np.ndarray

    @classmethod
    def build(cls, grid: TimeGrid, n: int, **fields) -> "GenericBackwardSpec":
        """Missing fields are zero; paths may be constants, node or half-grid samples."""
        vals = {}
        for key in _GENERIC_MATS + _GENERIC_VECS:
            shape = (n, n) if key in _GENERIC_MATS else (n,)
            arr = np.asarray(fields.pop(key, np.zeros(shape)), dtype=float)
            if arr.shape == shape:
                arr = np.broadcast_to(arr, (2 * grid.N + 1,) + shape).copy()
            arr = to_half(arr, grid)
            if arr.shape[1:] != shape:
                raise ValueError(f"{key} has shape {arr.shape[1:]}, expected {shape}")
            vals[key] = arr
        for key, shape in (("D1", (n, n)), ("D2", (n, n)), ("D3", (n,))):
            arr = np.asarray(fields.pop(key, np.zeros(shape)), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{key} has shape {arr.shape}, expected {shape}")
            vals[key] = arr
        if fields:
            raise TypeError(f"unknown fields: {sorted(fields)}")
        return cls(grid=grid, **vals)

    @property
    def n(self) -> int:
        return self.D1.shape[0]


def _generic_drift(spec: GenericBackwardSpec):
    n, grid = spec.n, spec.grid

    def f(s, y):
        j = grid.half_index(s)
        P1, P2, P3, P4 = unpack(y, n)
        C1, C2 = spec.C1[j], spec.C2[j]
        d1 = -(P1 @ spec.A1[j] + C1 @ P1 + C2 @ P1 @ spec.B1[j] + spec.C3[j])
        d2 = -(P2 @ spec.A1[j] + C1 @ P2 + spec.C4[j])
        d3 = -(C1 @ P3 + P2 @ spec.A2[j] + spec.C6[j])
        d4 = -(C1 @ P4 + C2 @ P1 @ spec.B2[j] + P1 @ spec.A2[j] + spec.C5[j])
        return pack(d1, d2, d3, d4)

    return f


def solve_generic_kernel(spec: GenericBackwardSpec, grid: TimeGrid | None = None) -> KernelSolution:
    grid = spec.grid if grid is None else grid
    if grid != spec.grid:
        raise ValueError("spec was built on a different grid")
    terminal = pack(spec.D1, spec.D2, np.zeros(spec.n), spec.D3)
    path = integrate_backward(_generic_drift(spec), terminal, grid)
    return KernelSolution.from_path(path, spec.n, "generic", grid)


def mixed_spec(problem: CoefficientSet, control: FeedbackControl) -> GenericBackwardSpec:
    """Generic-system coefficients for ``u = (theta1 + theta2) X + phi``.

    ``theta1`` is the gain seen by the perturbed state. With ``theta1 = 0``
    this is the closed-loop-representation system, with ``theta2 = 0`` the
    closed-loop-strategy system, and with both zero the open-loop system.
    """
    hc = problem.half
    T1, T2, phi = control.theta1, control.theta2, control.phi
    TT = T1 + T2
    tr = lambda M: np.swapaxes(M, -1, -2)  # noqa: E731
    Ath = hc.A + hc.B @ T1
    Cth = hc.C + hc.D @ T1
    C3 = -(hc.Q + tr(T1) @ hc.S + tr(T1) @ hc.R @ TT + tr(hc.S) @ TT)
    C4 = -(hc.Q_tilde + tr(T1) @ hc.S_tilde + tr(T1) @ hc.R_tilde @ TT + tr(hc.S_tilde) @ TT)
    mv = lambda M, v: np.einsum("kij,kj->ki", M, v)  # noqa: E731
    return GenericBackwardSpec.build(
        problem.grid,
        problem.n,
        A1=hc.A + hc.B @ TT,
        B1=hc.C + hc.D @ TT,
        A2=mv(hc.B, phi) + hc.b,
        B2=mv(hc.D, phi) + hc.sigma,
        C1=tr(Ath),
        C2=tr(Cth),
        C3=C3,
        C4=C4,
        C5=-mv(tr(hc.S) + tr(T1) @ hc.R, phi),
        C6=-mv(tr(hc.S_tilde) + tr(T1) @ hc.R_tilde, phi),
        D1=-problem.G,
        D2=-problem.G_tilde,
        D3=-problem.g,
    )


def open_spec(problem: CoefficientSet, u) -> GenericBackwardSpec:
    u_half = to_half(np.asarray(u, dtype=float).reshape(-1, problem.m), problem.grid)
    return mixed_spec(problem, FeedbackControl.open_loop(problem.grid, u_half, problem.n))


def solve_mixed_kernel(problem: CoefficientSet, control: FeedbackControl) -> KernelSolution:
    return solve_generic_kernel(mixed_spec(problem, control))


# ---------------------------------------------------------------------------
# adjoint pair and the decoupling residual


class AdjointPair:
    """Evaluates ``M(s, t)`` and ``N(s)`` from a kernel solution.

    ``M(k, x, mean_x) = P1 x + P2 E_t x + P3 + P4`` and
    ``N(k, x, u) = P1 (C x + D u + sigma) + L4`` at node ``k``.
    """

    def __init__(self, kernel: KernelSolution, problem: CoefficientSet):
        self.kernel = kernel
        self.problem = problem

    def M(self, k: int, x, mean_x=None) -> np.ndarray:
        K = self.kernel
        mean_x = x if mean_x is None else mean_x
        return K.P1[k] @ x + K.P2[k] @ mean_x + K.P3[k] + K.P4[k]

    def N(self, k: int, x, u) -> np.ndarray:
        p, K = self.problem, self.kernel
        return K.P1[k] @ (p.C[k] @ x + p.D[k] @ u + p.sigma[k]) + K.L4[k]


@dataclass(frozen=True)
class DecouplingResidual:
    times: np.ndarray
    residual: np.ndarray  # node-wise norm
    mean_state: np.ndarray

    @property
    def max(self) -> float:
        return float(np.max(self.residual))


def _as_control(problem: CoefficientSet, control) -> FeedbackControl:
    if isinstance(control, FeedbackControl):
        return control
    if hasattr(control, "feedback"):
        return control.feedback()
    return FeedbackControl.open_loop(problem.grid, np.asarray(control, dtype=float).reshape(-1, problem.m), problem.n)


def decoupling_residual(
    kernel: KernelSolution, problem, control=None, t: float = 0.0, xi=None
) -> DecouplingResidual:
    """Finite-difference check that the assembled ``E_t M(s, t)`` solves its BSDE.

    Along the conditional mean ``m(s) = E_t X(s)`` (started from ``xi`` at
    ``t``), every term is deterministic, so

        d/ds E_t M + C1 E_t M + C2 E_t N + (C3 + C4) m + C5 + C6 = 0

    must hold node-wise. The derivative uses second-order central differences
    inside and second-order one-sided stencils at the ends, so the residual is
    O(h^2). ``problem`` is a :class:`CoefficientSet` together with ``control``,
    or a :class:`GenericBackwardSpec` for the generic variant.
    """
    if isinstance(problem, GenericBackwardSpec):
        spec = problem
        x0 = None
    else:
        spec = mixed_spec(problem, _as_control(problem, control))
        x0 = problem.x0
    grid = spec.grid
    k0 = grid.index(t)

    def mean_rhs(s, m):
        j = grid.half_index(s)
        return spec.A1[j] @ m + spec.A2[j]

    if xi is None:
        if x0 is None:
            raise ValueError("xi is required for a generic spec")
        xi = integrate_forward(mean_rhs, x0, grid)[k0] if k0 > 0 else x0
    m = integrate_forward(mean_rhs, np.asarray(xi, dtype=float), grid, k0)
    K = kernel
    ks = np.arange(k0, grid.N + 1)
    EM = np.einsum("kij,kj->ki", K.P1[ks] + K.P2[ks], m) + K.P3[ks] + K.P4[ks]
    if k0 == grid.N:
        target = (spec.D1 + spec.D2) @ m[-1] + spec.D3
        return DecouplingResidual(grid.nodes[ks], np.array([np.linalg.norm(EM[-1] - target)]), m)
    even = 2 * ks
    EZ = np.einsum("kij,kj->ki", K.P1[ks], np.einsum("kij,kj->ki", spec.B1[even], m) + spec.B2[even]) + K.L4[ks]
    dEM = np.gradient(EM, grid.h, axis=0, edge_order=2)
    drift = (
        np.einsum("kij,kj->ki", spec.C1[even], EM)
        + np.einsum("kij,kj->ki", spec.C2[even], EZ)
        + np.einsum("kij,kj->ki", spec.C3[even] + spec.C4[even], m)
        + spec.C5[even]
        + spec.C6[even]
    )
    return DecouplingResidual(grid.nodes[ks], np.linalg.norm(dEM + drift, axis=1), m)


def solve_pbar1(problem: CoefficientSet, theta1=None) -> np.ndarray:
    """P1 equation of the strategy kernel for a fixed gain ``theta1``.

    This is the kernel of the purely quadratic part of a cost variation: the
    deviation ``X^eps - X`` runs with closed-loop coefficients
    ``A + B theta1``, ``C + D theta1``. ``theta1=None`` means zero gain.
    """
    hc, grid = problem.half, problem.grid
    if theta1 is None:
        theta1 = np.zeros((grid.N + 1, problem.m, problem.n))
    th = to_half(np.asarray(theta1, dtype=float), grid)

    def f(s, P):
        j = grid.half_index(s)
        T1 = th[j]
        Ath = hc.A[j] + hc.B[j] @ T1
        Cth = hc.C[j] + hc.D[j] @ T1
        W = hc.Q[j] + hc.S[j].T @ T1 + T1.T @ hc.S[j] + T1.T @ hc.R[j] @ T1
        return -(P @ Ath + Ath.T @ P + Cth.T @ P @ Cth - W)

    return integrate_backward(f, -problem.G, grid)
