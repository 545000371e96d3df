"""Problem data for time-inconsistent stochastic LQ control.

State equation (one-dimensional Brownian motion W)::

    dX = (A X + B u + b) ds + (C X + D u + sigma) dW,    X(t) = xi

and cost, with ``E_t`` the conditional expectation at the initial time::

    J = 1/2 E_t { int_t^T [ <Q X, X> + 2 <S X, u> + <R u, u>
                          + <Qt E_t X, E_t X> + 2 <St E_t X, E_t u>
                          + <Rt E_t u, E_t u> ] ds
                  + <G X(T), X(T)> + <Gt E_t X(T), E_t X(T)> + 2 <g, E_t X(T)> }

All coefficients are deterministic and stored as samples on a uniform grid.
Between nodes they are interpolated linearly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from types import SimpleNamespace
from typing import Any, Mapping

import numpy as np

__all__ = [
    "ProblemError",
    "TimeGrid",
    "CoefficientSet",
    "AggregateNotation",
    "FeedbackControl",
    "validate",
    "load_problem",
    "aggregates",
    "sample",
    "to_half",
]

SYMMETRY_LIMIT = 1e-8

# name -> (kind, shape code); shape codes are resolved against (n, m)
_MATRIX_FIELDS = {
    "A": ("path", ("n", "n")),
    "B": ("path", ("n", "m")),
    "C": ("path", ("n", "n")),
    "D": ("path", ("n", "m")),
    "Q": ("path", ("n", "n")),
    "S": ("path", ("m", "n")),
    "R": ("path", ("m", "m")),
    "Q_tilde": ("path", ("n", "n")),
    "S_tilde": ("path", ("m", "n")),
    "R_tilde": ("path", ("m", "m")),
    "G": ("const", ("n", "n")),
    "G_tilde": ("const", ("n", "n")),
}
_VECTOR_FIELDS = {
    "b": ("path", ("n",)),
    "sigma": ("path", ("n",)),
    "g": ("const", ("n",)),
    "x0": ("const", ("n",)),
}
_SYMMETRIC = ("Q", "R", "Q_tilde", "R_tilde", "G", "G_tilde")
_PATH_FIELDS = tuple(k for k, v in {**_MATRIX_FIELDS, **_VECTOR_FIELDS}.items() if v[0] == "path")


class ProblemError(ValueError):
    """Malformed problem description. ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"field {field!r}: {message}")


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``0 = t_0 < ... < t_N = T``."""

    T: float
    N: int

    def __post_init__(self):
        if not np.isfinite(self.T) or self.T <= 0:
            raise ProblemError("T", f"horizon must be positive and finite, got {self.T}")
        if int(self.N) != self.N or self.N < 2:
            raise ProblemError("N", f"need at least 2 intervals, got {self.N}")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "T", float(self.T))

    @property
    def h(self) -> float:
        return self.T / self.N

    @cached_property
    def nodes(self) -> np.ndarray:
        t = np.linspace(0.0, self.T, self.N + 1)
        t[-1] = self.T
        return t

    @cached_property
    def half_nodes(self) -> np.ndarray:
        """Nodes and interval midpoints, ``2N + 1`` points."""
        t = np.linspace(0.0, self.T, 2 * self.N + 1)
        t[-1] = self.T
        return t

    def half_index(self, s: float) -> int:
        j = int(round(2.0 * s / self.h))
        if not 0 <= j <= 2 * self.N or abs(self.half_nodes[j] - s) > 1e-9 * self.T:
            raise ValueError(f"time {s} is not a node or midpoint of the grid")
        return j

    def index(self, s: float) -> int:
        """Node index of ``s``; raises when ``s`` is not a grid node."""
        k = int(round(s / self.h))
        if not 0 <= k <= self.N or abs(self.nodes[k] - s) > 1e-9 * self.T:
            raise ValueError(f"time {s} is not a node of the grid on [0, {self.T}]")
        return k


def to_half(values: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Return samples on the half grid (nodes and midpoints).

    Accepts either node samples, shape ``(N+1, ...)``, which are linearly
    interpolated at the midpoints, or half-grid samples, shape ``(2N+1, ...)``,
    which are returned unchanged.
    """
    values = np.asarray(values, dtype=float)
    if values.shape[0] == 2 * grid.N + 1:
        return values
    if values.shape[0] != grid.N + 1:
        raise ValueError(
            f"path has {values.shape[0]} samples; expected {grid.N + 1} (nodes) "
            f"or {2 * grid.N + 1} (half grid)"
        )
    out = np.empty((2 * grid.N + 1,) + values.shape[1:])
    out[0::2] = values
    out[1::2] = 0.5 * (values[:-1] + values[1:])
    return out


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """Validated problem data. Path fields have shape ``(N+1, ...)``."""

    grid: TimeGrid
    n: int
    m: int
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    b: np.ndarray
    sigma: np.ndarray
    Q: np.ndarray
    S: np.ndarray
    R: np.ndarray
    Q_tilde: np.ndarray
    S_tilde: np.ndarray
    R_tilde: np.ndarray
    G: np.ndarray
    G_tilde: np.ndarray
    g: np.ndarray
    x0: np.ndarray
    symmetry_correction: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> float:
        return self.grid.T

    @property
    def N(self) -> int:
        return self.grid.N

    @cached_property
    def half(self) -> SimpleNamespace:
        """Path coefficients sampled on the half grid (used by RK4 stages)."""
        return SimpleNamespace(**{k: to_half(getattr(self, k), self.grid) for k in _PATH_FIELDS})

    @cached_property
    def has_tildes(self) -> bool:
        return any(np.any(getattr(self, k) != 0) for k in ("Q_tilde", "S_tilde", "R_tilde", "G_tilde"))

    def to_raw(self) -> dict:
        """Plain-JSON representation accepted by :func:`validate`."""
        raw = {"n": self.n, "m": self.m, "T": self.T, "N": self.N}
        for key in list(_MATRIX_FIELDS) + list(_VECTOR_FIELDS):
            raw[key] = getattr(self, key).tolist()
        return raw

    def replace(self, **changes) -> "CoefficientSet":
        raw = self.to_raw()
        for key, value in changes.items():
            raw[key] = np.asarray(value).tolist() if isinstance(value, np.ndarray) else value
        return validate(raw)


@dataclass(frozen=True)
class AggregateNotation:
    """Sums of the direct and conditional-expectation weights."""

    R: np.ndarray  # R + R_tilde, (N+1, m, m)
    Q: np.ndarray  # Q + Q_tilde, (N+1, n, n)
    G: np.ndarray  # G + G_tilde, (n, n)
    S: np.ndarray  # S + S_tilde, (N+1, m, n)


@dataclass(frozen=True, eq=False)
class FeedbackControl:
    """Control ``u = (theta1 + theta2) X + phi`` sampled on the half grid.

    In a spike perturbation only ``theta1`` sees the perturbed state, so the
    split decides which notion of equilibrium is probed.
    """

    theta1: np.ndarray  # (2N+1, m, n)
    theta2: np.ndarray  # (2N+1, m, n)
    phi: np.ndarray  # (2N+1, m)

    @classmethod
    def build(cls, grid: TimeGrid, m: int, n: int, theta1=None, theta2=None, phi=None) -> "FeedbackControl":
        zeros_t = np.zeros((grid.N + 1, m, n))
        th1 = to_half(zeros_t if theta1 is None else theta1, grid)
        th2 = to_half(zeros_t if theta2 is None else theta2, grid)
        ph = to_half(np.zeros((grid.N + 1, m)) if phi is None else phi, grid)
        for name, arr in (("theta1", th1), ("theta2", th2), ("phi", ph)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
        if th1.shape[1:] != (m, n) or th2.shape[1:] != (m, n) or ph.shape[1:] != (m,):
            raise ValueError("feedback dimensions inconsistent with (m, n)")
        return cls(th1, th2, ph)

    @classmethod
    def open_loop(cls, grid: TimeGrid, u: np.ndarray, n: int) -> "FeedbackControl":
        """Purely deterministic control ``u``."""
        u = to_half(u, grid)
        return cls.build(grid, u.shape[1], n, phi=u)

    @property
    def gain(self) -> np.ndarray:
        return self.theta1 + self.theta2


def _resolve_shape(code: tuple, n: int, m: int) -> tuple:
    return tuple(n if c == "n" else m for c in code)


def _read_entry(raw: Mapping, key: str, kind: str, shape: tuple, N: int) -> np.ndarray:
    value = raw.get(key)
    path_shape = (N + 1,) + shape
    if value is None:
        return np.zeros(path_shape if kind == "path" else shape)
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ProblemError(key, f"not a numeric array ({exc})") from None
    if arr.ndim == 0 and all(d == 1 for d in shape):
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ProblemError(key, "contains non-finite entries")
    if kind == "path":
        if arr.shape == shape:
            return np.broadcast_to(arr, path_shape).copy()
        if arr.shape == path_shape:
            return arr.copy()
        if len(shape) == 1 and shape[0] == 1 and arr.shape == (N + 1,):
            return arr.reshape(path_shape).copy()
        raise ProblemError(
            key, f"shape {arr.shape} matches neither constant {shape} nor per-node {path_shape}"
        )
    if arr.shape != shape:
        raise ProblemError(key, f"shape {arr.shape}, expected {shape}")
    return arr.copy()


def validate(raw: Mapping[str, Any] | CoefficientSet) -> CoefficientSet:
    """Check a raw problem description and return a :class:`CoefficientSet`.

    Missing coefficients default to zero. Quadratic-form weights are replaced
    by their symmetric parts; the largest correction (Frobenius norm, over all
    nodes) is stored in ``symmetry_correction``.

    Raises
    ------
    ProblemError
        On dimension mismatch, non-finite data, or a symmetry defect larger
        than round-off (``> 1e-8``).
    """
    if isinstance(raw, CoefficientSet):
        raw = raw.to_raw()
    if not isinstance(raw, Mapping):
        raise ProblemError("<root>", "problem description must be a JSON object")
    for key in ("n", "m", "T", "N"):
        if key not in raw:
            raise ProblemError(key, "missing")
    try:
        n, m, N = int(raw["n"]), int(raw["m"]), int(raw["N"])
        T = float(raw["T"])
    except (TypeError, ValueError) as exc:
        raise ProblemError("n/m/T/N", f"not numeric ({exc})") from None
    for key, val in (("n", n), ("m", m)):
        if val < 1 or val != raw[key]:
            raise ProblemError(key, f"dimension must be a positive integer, got {raw[key]!r}")
    grid = TimeGrid(T, N)

    data = {}
    for key, (kind, code) in {**_MATRIX_FIELDS, **_VECTOR_FIELDS}.items():
        data[key] = _read_entry(raw, key, kind, _resolve_shape(code, n, m), N)

    correction = 0.0
    for key in _SYMMETRIC:
        M = data[key]
        skew = 0.5 * (M - np.swapaxes(M, -1, -2))
        size = float(np.max(np.linalg.norm(skew.reshape(-1, *M.shape[-2:]), axis=(-2, -1))))
        if size > SYMMETRY_LIMIT:
            raise ProblemError(key, f"not symmetric (skew part {size:.3g} exceeds {SYMMETRY_LIMIT:g})")
        data[key] = M - skew
        correction = max(correction, size)

    meta = {k: raw[k] for k in ("name", "run") if k in raw}
    return CoefficientSet(grid=grid, n=n, m=m, symmetry_correction=correction, meta=meta, **data)


def load_problem(path) -> CoefficientSet:
    """Read and validate a problem JSON file."""
    with open(path) as fh:
        text = fh.read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProblemError("<json>", f"parse error at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return validate(raw)


def aggregates(coeffs: CoefficientSet) -> AggregateNotation:
    return AggregateNotation(
        R=coeffs.R + coeffs.R_tilde,
        Q=coeffs.Q + coeffs.Q_tilde,
        G=coeffs.G + coeffs.G_tilde,
        S=coeffs.S + coeffs.S_tilde,
    )


def sample(path: np.ndarray, s: float, grid: TimeGrid) -> np.ndarray:
    """Piecewise-linear value of a node path at time ``s`` in ``[0, T]``."""
    path = np.asarray(path)
    if path.shape[0] != grid.N + 1:
        raise ValueError(f"path must have {grid.N + 1} node samples")
    if not (0.0 <= s <= grid.T):
        raise ValueError(f"time {s} outside [0, {grid.T}]")
    x = s / grid.h
    near = int(round(x))
    if abs(x - near) < 1e-9:
        return path[near].copy()
    k = min(int(np.floor(x)), grid.N - 1)
    w = (s - grid.nodes[k]) / grid.h
    return (1.0 - w) * path[k] + w * path[k + 1]
