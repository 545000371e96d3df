"""Monte Carlo verification of the equilibrium definitions.

Paths are Euler-Maruyama discretizations on the problem grid. Noise for path
``i`` comes from a counter-based Philox stream keyed by ``(base_seed, i // 256)``
(column ``i % 256``), generated over the whole horizon, so an ensemble is
reproducible bit for bit whatever the worker count and whatever the restart
time. Base and perturbed paths share their increments.

Conditional expectations ``E_t`` are estimated by restarting from a fixed
state at ``t``: paths are arranged in ``outer`` groups of ``inner`` paths,
the group mean stands in for ``E_t``, and products of means are
bias-corrected with the U-statistic ``(k a(xbar, ybar) - mean_i a(x_i, y_i)) / (k - 1)``,
which is unbiased for ``a(E x, E y)``. Error bars come from the spread of the
``outer`` group estimates.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .export import write_csv
from .kernels import KernelSolution, solve_mixed_kernel, solve_pbar1
from .problem import CoefficientSet, FeedbackControl

__all__ = [
    "BLOCK",
    "MCParams",
    "SimulationEnsemble",
    "CostEstimate",
    "PerturbationProbe",
    "Quotient",
    "QuotientTable",
    "DeviationEstimate",
    "Decomposition",
    "ExplosionError",
    "noise",
    "simulate",
    "estimate_cost",
    "perturbation_quotient",
    "perturbation_quotients",
    "deviation_estimate",
    "decompose_variation",
    "euler_mean",
    "loglog_slope",
    "j2_prediction",
    "write_ensemble_csv",
    "write_quotients_csv",
]

BLOCK = 256  # paths per Philox stream
_CHUNK_PATHS = 16384  # paths per work item; fixed so results do not depend on threads


class ExplosionError(ArithmeticError):
    """A simulated state became non-finite."""


@dataclass(frozen=True)
class MCParams:
    """Monte Carlo budget. ``base_seed`` is mandatory."""

    base_seed: int
    outer: int = 4096
    inner: int = 256
    threads: int | None = None

    def __post_init__(self):
        if not 0 <= int(self.base_seed) < 2**64:
            raise ValueError("base_seed must be an unsigned 64-bit integer")
        if self.outer < 2 or self.inner < 2:
            raise ValueError("need at least 2 outer groups and 2 inner paths")

    @property
    def workers(self) -> int:
        if self.threads is not None:
            return max(1, int(self.threads))
        env = os.environ.get("TILQ_THREADS")
        if env:
            return max(1, int(env))
        return max(1, min(os.cpu_count() or 1, 8))


def noise(base_seed: int, start: int, count: int, N: int, h: float) -> np.ndarray:
    """Brownian increments ``(N, count)`` for paths ``start .. start+count-1``."""
    first, last = start // BLOCK, (start + count - 1) // BLOCK
    blocks = [
        np.random.Generator(np.random.Philox(key=[int(base_seed), b])).standard_normal((N, BLOCK))
        for b in range(first, last + 1)
    ]
    dW = np.concatenate(blocks, axis=1) if len(blocks) > 1 else blocks[0]
    off = start - first * BLOCK
    return dW[:, off : off + count] * np.sqrt(h)


# ---------------------------------------------------------------------------
# controls


def _gain_phi(problem: CoefficientSet, control):
    """Node samples of the total gain and affine term of any control description."""
    if hasattr(control, "feedback"):
        control = control.feedback()
    if not isinstance(control, FeedbackControl):
        control = FeedbackControl.open_loop(problem.grid, np.asarray(control, dtype=float).reshape(-1, problem.m), problem.n)
    return control.gain[0::2], control.phi[0::2]


def euler_mean(problem: CoefficientSet, gain: np.ndarray, phi: np.ndarray, x0=None) -> np.ndarray:
    """Expectation of the Euler-Maruyama chain under ``u = gain X + phi``, all nodes."""
    p = problem
    m = np.empty((p.N + 1, p.n))
    m[0] = p.x0 if x0 is None else x0
    h = p.grid.h
    for k in range(p.N):
        Ak = p.A[k] + p.B[k] @ gain[k]
        m[k + 1] = m[k] + h * (Ak @ m[k] + p.B[k] @ phi[k] + p.b[k])
    return m


# ---------------------------------------------------------------------------
# path sweep


def _step(p: CoefficientSet, k: int, X, u, dWk):
    h = p.grid.h
    drift = X @ p.A[k].T + u @ p.B[k].T + p.b[k]
    diff = X @ p.C[k].T + u @ p.D[k].T + p.sigma[k]
    return X + drift * h + diff * dWk[:, None]


def _sweep(p: CoefficientSet, gain, phi, theta1, xi, k0: int, dW, perts):
    """Yield one Euler-Maruyama transition per step ``k >= k0``.

    Base control ``u = gain X + phi``; perturbed copy ``i`` uses
    ``u + theta1 (Xe - X) + v_i 1[k0 <= k < k0 + K_i]``.
    """
    P = dW.shape[1]
    X = np.broadcast_to(np.asarray(xi, dtype=float), (P, p.n)).copy()
    Xe = [X.copy() for _ in perts]
    for k in range(k0, p.N):
        u = X @ gain[k].T + phi[k]
        Xn = _step(p, k, X, u, dW[k])
        ue, Xen = [], []
        for (v, K), xe in zip(perts, Xe):
            w = u + (xe - X) @ theta1[k].T
            if k < k0 + K:
                w = w + v
            ue.append(w)
            Xen.append(_step(p, k, xe, w, dW[k]))
        if not np.all(np.isfinite(Xn)):
            raise ExplosionError(f"state became non-finite at step {k}")
        yield k, X, u, Xn, Xe, ue, Xen
        X, Xe = Xn, Xen


def _qf(M, x, y):
    """Row-wise ``y' M x``."""
    return np.einsum("pi,pi->p", x @ M.T, y)


class _CostAcc:
    """Nested-sampling estimate of the cost, one value per group."""

    def __init__(self, p: CoefficientSet, inner: int, linear: bool = True):
        self.p, self.k, self.linear = p, inner, linear
        self.path = 0.0
        self.tilde = 0.0
        self.on = _active_weights(p)

    def _u(self, M, x, y):
        k = self.k
        G = x.shape[0] // k
        per = _qf(M, x, y).reshape(G, k).mean(axis=1)
        xb = x.reshape(G, k, -1).mean(axis=1)
        yb = y.reshape(G, k, -1).mean(axis=1)
        return (k * _qf(M, xb, yb) - per) / (k - 1)

    def update(self, k, X, u, Xn):
        p, h, on = self.p, self.p.grid.h, self.on
        Xm = 0.5 * (X + Xn)
        run = 0.0
        if on["Q"]:
            Q = p.Q[k]
            run = run + (_qf(Q, X, X) + _qf(Q, X, Xn) + _qf(Q, Xn, Xn)) / 3.0
        if on["S"]:
            run = run + 2.0 * _qf(p.S[k], Xm, u)
        if on["R"]:
            run = run + _qf(p.R[k], u, u)
        self.path = self.path + h * run
        tl = 0.0
        if on["Q_tilde"]:
            Qt = p.Q_tilde[k]
            tl = tl + (self._u(Qt, X, X) + self._u(Qt, X, Xn) + self._u(Qt, Xn, Xn)) / 3.0
        if on["S_tilde"]:
            tl = tl + 2.0 * self._u(p.S_tilde[k], Xm, u)
        if on["R_tilde"]:
            tl = tl + self._u(p.R_tilde[k], u, u)
        self.tilde = self.tilde + h * tl

    def finalize(self, XN) -> np.ndarray:
        p, k = self.p, self.k
        G = XN.shape[0] // k
        direct = (self.path + _qf(p.G, XN, XN)).reshape(G, k).mean(axis=1)
        tilde = self.tilde + self._u(p.G_tilde, XN, XN)
        if self.linear:
            tilde = tilde + 2.0 * XN.reshape(G, k, -1).mean(axis=1) @ p.g
        return 0.5 * (direct + tilde)


def _active_weights(p: CoefficientSet) -> dict:
    return {key: bool(np.any(getattr(p, key))) for key in ("Q", "S", "R", "Q_tilde", "S_tilde", "R_tilde")}


def _run_chunks(mc: MCParams, fn) -> dict:
    """Evaluate ``fn(first_group, n_groups)`` over all groups; ordered concatenation."""
    per = max(1, _CHUNK_PATHS // mc.inner)
    starts = list(range(0, mc.outer, per))
    jobs = [(s, min(per, mc.outer - s)) for s in starts]
    if mc.workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=mc.workers) as pool:
            parts = list(pool.map(lambda j: fn(*j), jobs))
    else:
        parts = [fn(*j) for j in jobs]
    return {key: np.concatenate([part[key] for part in parts]) for key in parts[0]}


def _mean_err(x: np.ndarray):
    return float(np.mean(x)), float(np.std(x, ddof=1) / np.sqrt(x.shape[0]))


# ---------------------------------------------------------------------------
# public types


@dataclass(frozen=True, eq=False)
class SimulationEnsemble:
    """Euler-Maruyama paths from node ``k0``; ``perturbed`` shares the noise."""

    times: np.ndarray
    paths: np.ndarray  # (n_paths, len(times), n)
    perturbed: np.ndarray | None
    base_seed: int
    scheme: str = "euler-maruyama"

    @property
    def deviation(self) -> np.ndarray | None:
        return None if self.perturbed is None else self.perturbed - self.paths

    def summary_rows(self):
        mean = self.paths.mean(axis=0)
        var = self.paths.var(axis=0, ddof=1)
        for k, t in enumerate(self.times):
            yield [k, t, *mean[k], *var[k]]


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    stderr: float
    inner_samples: int
    outer_samples: int


@dataclass(frozen=True)
class PerturbationProbe:
    """Spike ``v 1[t, t+eps)`` on the control, for each ``eps`` in ``epsilons``.

    ``mode="open"`` perturbs the control process (the perturbed state does
    not feed back); ``mode="closed"`` lets the perturbed state re-enter the
    feedback gain.
    """

    t: float
    v: tuple
    epsilons: tuple
    mode: str = "closed"

    def __post_init__(self):
        if self.mode not in ("open", "closed"):
            raise ValueError(f"mode must be 'open' or 'closed', got {self.mode!r}")
        eps = tuple(float(e) for e in self.epsilons)
        if not eps or any(e <= 0 for e in eps):
            raise ValueError("epsilons must be positive")
        object.__setattr__(self, "epsilons", eps)
        object.__setattr__(self, "v", tuple(float(x) for x in np.atleast_1d(self.v)))

    def steps(self, problem: CoefficientSet):
        """Start node and window lengths in steps; validates grid alignment."""
        grid = problem.grid
        k0 = grid.index(self.t)
        Ks = []
        for e in self.epsilons:
            K = int(round(e / grid.h))
            if abs(K * grid.h - e) > 1e-9 * grid.T:
                raise ValueError(f"epsilon {e} is not a multiple of h = {grid.h}")
            if K < 2:
                raise ValueError(f"epsilon {e} is below 2h")
            if k0 + K > grid.N:
                raise ValueError(f"window [t, t+{e}] leaves the horizon")
            Ks.append(K)
        if len(self.v) != problem.m:
            raise ValueError(f"v has length {len(self.v)}, expected m = {problem.m}")
        return k0, Ks


@dataclass(frozen=True)
class Quotient:
    t: float
    v: tuple
    eps: float
    quotient: float
    stderr: float
    mode: str


@dataclass(frozen=True)
class QuotientTable:
    """Difference quotients with the finite-epsilon acceptance rule.

    A series (fixed ``t``, ``v``) is consistent with equilibrium when each of
    its quotients is at least ``-(2 stderr + slope_tol * eps * |slope|)``,
    with ``slope`` the least-squares slope of quotient against ``eps``. This
    is a surrogate for the lim-inf in the definition, which finitely many
    epsilons cannot certify.
    """

    rows: tuple
    slope_tol: float = 0.5

    def series(self):
        keys = []
        for r in self.rows:
            if (r.t, r.v) not in keys:
                keys.append((r.t, r.v))
        return {key: [r for r in self.rows if (r.t, r.v) == key] for key in keys}

    def slope(self, rows) -> float:
        if len(rows) < 2:
            return 0.0
        e = np.array([r.eps for r in rows])
        q = np.array([r.quotient for r in rows])
        return float(np.polyfit(e, q, 1)[0])

    def threshold(self, row, slope) -> float:
        return -(2.0 * row.stderr + self.slope_tol * row.eps * abs(slope))

    @property
    def verdict(self) -> bool:
        for rows in self.series().values():
            s = self.slope(rows)
            if any(r.quotient < self.threshold(r, s) for r in rows):
                return False
        return True

    def violations(self, k: float = 3.0):
        """Rows with quotient at most ``-k * stderr``."""
        return [r for r in self.rows if r.quotient <= -k * r.stderr]

    def csv_rows(self):
        for rows in self.series().values():
            s = self.slope(rows)
            for r in rows:
                yield [r.t, *r.v, r.eps, r.quotient, r.stderr, s, self.threshold(r, s)]


@dataclass(frozen=True)
class DeviationEstimate:
    epsilons: np.ndarray
    mean_sup: np.ndarray  # E sup_{[t,t+eps]} |X0|^2
    stderr: np.ndarray
    slope: float


@dataclass(frozen=True)
class Decomposition:
    """Per-epsilon terms of the cost-difference decomposition (arrays over eps)."""

    epsilons: np.ndarray
    direct: np.ndarray
    direct_stderr: np.ndarray
    J1: np.ndarray
    J2: np.ndarray
    J2_stderr: np.ndarray
    cross: np.ndarray
    error: np.ndarray
    extra: dict = field(default_factory=dict)


def loglog_slope(x, y) -> float:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


# ---------------------------------------------------------------------------
# operations


def simulate(problem, control, base_seed: int, n_paths: int, xi=None, t: float = 0.0, probe=None, eps=None):
    """Simulate ``n_paths`` paths from ``xi`` at ``t`` (default ``x0`` at 0).

    With a ``probe``, a perturbed twin with the spike of length ``eps``
    (default the probe's first epsilon) is simulated on the same noise.
    """
    p = problem
    if n_paths < 2:
        raise ValueError("need at least 2 paths")
    gain, phi = _gain_phi(p, control)
    theta1 = np.zeros_like(gain)
    perts = []
    if probe is not None:
        if probe.t != t:
            t = probe.t
        k0, Ks = probe.steps(p)
        K = Ks[0] if eps is None else Ks[list(probe.epsilons).index(float(eps))]
        perts = [(np.array(probe.v), K)]
        if probe.mode == "closed":
            theta1 = gain
    else:
        k0 = p.grid.index(t)
    if xi is None:
        xi = euler_mean(p, gain, phi)[k0]
    dW = noise(base_seed, 0, n_paths, p.N, p.grid.h)
    out = np.empty((n_paths, p.N + 1 - k0, p.n))
    pert = np.empty_like(out) if perts else None
    for k, X, u, Xn, Xe, ue, Xen in _sweep(p, gain, phi, theta1, xi, k0, dW, perts):
        out[:, k - k0] = X
        if perts:
            pert[:, k - k0] = Xe[0]
        last = (Xn, Xen)
    out[:, -1] = last[0]
    if perts:
        pert[:, -1] = last[1][0]
    return SimulationEnsemble(p.grid.nodes[k0:], out, pert, int(base_seed))


def estimate_cost(problem, t: float, xi, control, mc: MCParams) -> CostEstimate:
    """Nested Monte Carlo estimate of the cost from state ``xi`` at ``t``."""
    p = problem
    k0 = p.grid.index(t)
    gain, phi = _gain_phi(p, control)
    xi = np.asarray(xi, dtype=float)
    if not np.all(np.isfinite(xi)):
        raise ValueError("xi has non-finite entries")

    def chunk(g0, ng):
        dW = noise(mc.base_seed, g0 * mc.inner, ng * mc.inner, p.N, p.grid.h)
        acc = _CostAcc(p, mc.inner)
        X = np.broadcast_to(xi, (dW.shape[1], p.n))
        for k, X, u, Xn, *_ in _sweep(p, gain, phi, gain, xi, k0, dW, []):
            acc.update(k, X, u, Xn)
            X = Xn
        return {"J": acc.finalize(X)}

    J = _run_chunks(mc, chunk)["J"]
    mean, err = _mean_err(J)
    return CostEstimate(mean, err, mc.inner, mc.outer)


def _probe_gains(p, control, mode):
    gain, phi = _gain_phi(p, control)
    theta1 = gain if mode == "closed" else np.zeros_like(gain)
    return gain, phi, theta1


def perturbation_quotients(problem, control, probes, mc: MCParams, xi=None, slope_tol: float = 0.5) -> QuotientTable:
    """Common-random-number quotients ``[J(u^eps) - J(u)] / eps`` for many probes.

    Probes sharing ``t`` and ``mode`` share one base ensemble. The restart
    state at ``t`` defaults to the mean of the equilibrium state there.
    """
    p = problem
    rows = []
    groups = {}
    for probe in probes:
        groups.setdefault((probe.t, probe.mode), []).append(probe)
    for (t, mode), plist in groups.items():
        gain, phi, theta1 = _probe_gains(p, control, mode)
        k0 = p.grid.index(t)
        x_t = euler_mean(p, gain, phi)[k0] if xi is None else np.asarray(xi, dtype=float)
        perts, labels = [], []
        for probe in plist:
            _, Ks = probe.steps(p)
            for e, K in zip(probe.epsilons, Ks):
                perts.append((np.array(probe.v), K))
                labels.append((probe, e))

        def chunk(g0, ng):
            dW = noise(mc.base_seed, g0 * mc.inner, ng * mc.inner, p.N, p.grid.h)
            base = _CostAcc(p, mc.inner)
            accs = [_CostAcc(p, mc.inner) for _ in perts]
            X, Xe = None, None
            for k, X, u, Xn, Xe, ue, Xen in _sweep(p, gain, phi, theta1, x_t, k0, dW, perts):
                base.update(k, X, u, Xn)
                for acc, a, b, c in zip(accs, Xe, ue, Xen):
                    acc.update(k, a, b, c)
                X, Xe = Xn, Xen
            J0 = base.finalize(X)
            return {f"d{i}": acc.finalize(xe) - J0 for i, (acc, xe) in enumerate(zip(accs, Xe))}

        res = _run_chunks(mc, chunk)
        for i, (probe, e) in enumerate(labels):
            mean, err = _mean_err(res[f"d{i}"])
            rows.append(Quotient(t, probe.v, e, mean / e, err / e, mode))
    return QuotientTable(tuple(rows), slope_tol)


def perturbation_quotient(problem, control, probe: PerturbationProbe, mc: MCParams, xi=None, slope_tol=0.5) -> QuotientTable:
    return perturbation_quotients(problem, control, [probe], mc, xi, slope_tol)


def deviation_estimate(problem, control, probe: PerturbationProbe, mc: MCParams, xi=None) -> DeviationEstimate:
    """``E sup_{[t, t+eps]} |X^eps - X|^2`` for each epsilon, with log-log slope."""
    p = problem
    gain, phi, theta1 = _probe_gains(p, control, probe.mode)
    k0, Ks = probe.steps(p)
    x_t = euler_mean(p, gain, phi)[k0] if xi is None else np.asarray(xi, dtype=float)
    v = np.array(probe.v)
    perts = [(v, K) for K in Ks]
    kmax = k0 + max(Ks)

    def chunk(g0, ng):
        P = ng * mc.inner
        dW = noise(mc.base_seed, g0 * mc.inner, P, p.N, p.grid.h)
        sup = [np.zeros(P) for _ in perts]
        for k, X, u, Xn, Xe, ue, Xen in _sweep(p, gain, phi, theta1, x_t, k0, dW, perts):
            for i, ((_, K), xen) in enumerate(zip(perts, Xen)):
                if k < k0 + K:
                    sup[i] = np.maximum(sup[i], np.sum((xen - Xn) ** 2, axis=1))
            if k + 1 >= kmax:
                break
        return {f"s{i}": s.reshape(ng, mc.inner).mean(axis=1) for i, s in enumerate(sup)}

    res = _run_chunks(mc, chunk)
    stats = [_mean_err(res[f"s{i}"]) for i in range(len(perts))]
    means = np.array([s[0] for s in stats])
    errs = np.array([s[1] for s in stats])
    eps = np.array(probe.epsilons)
    return DeviationEstimate(eps, means, errs, loglog_slope(eps, means))


def _j1_kernel_terms(p: CoefficientSet, control: FeedbackControl, kernel: KernelSolution, v):
    """Node-wise affine map ``X -> <H(X), v>`` of the first-order term.

    ``H = [S_agg + R_agg Th - (B'(P1+P2) + D'P1(C + D Th))] X + R_agg v / 2 + R_agg phi
          - B'(P3+P4) - D'P1(D phi + sigma)``, with ``Th = theta1 + theta2``.
    Returns ``(lin (N+1, n), const (N+1,))``.
    """
    Th = control.gain[0::2]
    phi = control.phi[0::2]
    Rn = p.R + p.R_tilde
    Sn = p.S + p.S_tilde
    lin = np.empty((p.N + 1, p.n))
    const = np.empty(p.N + 1)
    for k in range(p.N + 1):
        P1, P2, P3, P4 = kernel.P1[k], kernel.P2[k], kernel.P3[k], kernel.P4[k]
        B, C, D = p.B[k], p.C[k], p.D[k]
        Hx = Sn[k] + Rn[k] @ Th[k] - (B.T @ (P1 + P2) + D.T @ P1 @ (C + D @ Th[k]))
        h0 = 0.5 * Rn[k] @ v + Rn[k] @ phi[k] - B.T @ (P3 + P4) - D.T @ (P1 @ (D @ phi[k] + p.sigma[k]) + kernel.L4[k])
        lin[k] = Hx.T @ v
        const[k] = h0 @ v
    return lin, const


def decompose_variation(problem, theta1, theta2, phi, probe: PerturbationProbe, mc: MCParams, xi=None, kernel=None) -> Decomposition:
    """Split ``J(u^eps) - J(u)`` into first-order, second-order and cross terms.

    ``u = (theta1 + theta2) X + phi`` and the perturbed control feeds
    ``theta1`` with the perturbed state. For each epsilon:

    * ``direct``: Monte Carlo cost difference (common random numbers);
    * ``J1``: the kernel expression ``E int_t^{t+eps} <H, v>`` along the
      simulated mean state, with the mixed kernel for ``(theta1, theta2, phi)``;
    * ``J2``: Monte Carlo of the quadratic-in-deviation part of the cost;
    * ``cross``: ``E int_t^{t+eps} <(S_agg' + theta1' R_agg) v, X^eps - X>``.

    ``error = |direct - (J1 + J2 + cross)|``. ``extra["J2_kernel"]`` holds
    the small-epsilon prediction ``(eps/2) v' D' Pbar1 D v`` (``Pbar1`` from
    the strategy kernel of ``theta1``, see :func:`j2_prediction`).
    """
    p = problem
    control = FeedbackControl.build(p.grid, p.m, p.n, theta1=theta1, theta2=theta2, phi=phi)
    if probe.mode != "closed":
        raise ValueError("decompose_variation takes the split explicitly; use mode='closed'")
    k0, Ks = probe.steps(p)
    v = np.array(probe.v)
    th1 = control.theta1[0::2]
    gain, ph = control.gain[0::2], control.phi[0::2]
    x_t = euler_mean(p, gain, ph)[k0] if xi is None else np.asarray(xi, dtype=float)
    if kernel is None:
        kernel = solve_mixed_kernel(p, control)
    lin, const = _j1_kernel_terms(p, control, kernel, v)
    Rn = p.R + p.R_tilde
    Sn = p.S + p.S_tilde
    cross_vec = np.stack([(Sn[k].T + th1[k].T @ Rn[k]) @ v for k in range(p.N + 1)])
    perts = [(v, K) for K in Ks]
    h = p.grid.h
    p2 = p.replace(g=np.zeros(p.n))  # J2 has no linear terminal term

    def chunk(g0, ng):
        P = ng * mc.inner
        dW = noise(mc.base_seed, g0 * mc.inner, P, p.N, h)
        base = _CostAcc(p, mc.inner)
        accs = [_CostAcc(p, mc.inner) for _ in perts]
        j2 = [_CostAcc(p2, mc.inner, linear=False) for _ in perts]
        j1 = [np.zeros(P) for _ in perts]
        cr = [np.zeros(P) for _ in perts]
        X, Xe = None, None
        for k, X, u, Xn, Xe, ue, Xen in _sweep(p, gain, ph, th1, x_t, k0, dW, perts):
            base.update(k, X, u, Xn)
            for i, (K, a, b, c) in enumerate(zip(Ks, Xe, ue, Xen)):
                accs[i].update(k, a, b, c)
                d0, d1 = a - X, c - Xn
                j2[i].update(k, d0, d0 @ th1[k].T, d1)
                if k < k0 + K:
                    # trapezoid in time along each path
                    j1[i] += 0.5 * h * (X @ lin[k] + const[k] + Xn @ lin[k + 1] + const[k + 1])
                    cr[i] += 0.5 * h * ((d0 + d1) @ cross_vec[k])
            X, Xe = Xn, Xen
        J0 = base.finalize(X)
        out = {}
        for i in range(len(perts)):
            out[f"d{i}"] = accs[i].finalize(Xe[i]) - J0
            out[f"j2_{i}"] = j2[i].finalize(Xe[i] - X)
            out[f"j1_{i}"] = j1[i].reshape(ng, mc.inner).mean(axis=1)
            out[f"c{i}"] = cr[i].reshape(ng, mc.inner).mean(axis=1)
        return out

    res = _run_chunks(mc, chunk)
    n_e = len(perts)
    stat = lambda key: np.array([_mean_err(res[f"{key}{i}"]) for i in range(n_e)])  # noqa: E731
    d, j1, j2, c = stat("d"), stat("j1_"), stat("j2_"), stat("c")
    err = np.abs(d[:, 0] - (j1[:, 0] + j2[:, 0] + c[:, 0]))
    recon = np.array([_mean_err(res[f"d{i}"] - res[f"j1_{i}"] - res[f"j2_{i}"] - res[f"c{i}"]) for i in range(n_e)])
    eps = np.array(probe.epsilons)
    return Decomposition(
        eps,
        d[:, 0],
        d[:, 1],
        j1[:, 0],
        j2[:, 0],
        j2[:, 1],
        c[:, 0],
        err,
        extra={"error_stderr": recon[:, 1], "J1_stderr": j1[:, 1]},
    )


def j2_prediction(problem, theta1, t: float, v, eps: float, literal: bool = False) -> float:
    """Small-epsilon value of the second-order term, ``-(eps/2) v' D' Pbar1 D v``.

    ``Pbar1`` solves the strategy-kernel P1 equation for gain ``theta1``, with
    ``Pbar1(T) = -G``. Since the kernels carry the opposite sign of the value
    (``Pbar1 = -G`` at ``T``), the positive cost curvature ``(eps/2) v'D'GDv``
    near ``T`` comes with a minus sign. ``literal=True`` returns the value
    with the opposite sign, for comparison.
    """
    p = problem
    k = p.grid.index(t)
    P = solve_pbar1(p, theta1)[k]
    v = np.asarray(v, dtype=float)
    val = 0.5 * eps * float(v @ p.D[k].T @ P @ p.D[k] @ v)
    return val if literal else -val


# ---------------------------------------------------------------------------
# CSV export


def write_ensemble_csv(path, ensemble: SimulationEnsemble) -> None:
    n = ensemble.paths.shape[2]
    header = ["node", "t"] + [f"mean_{i}" for i in range(n)] + [f"var_{i}" for i in range(n)]
    write_csv(path, header, ensemble.summary_rows())


def write_quotients_csv(path, table: QuotientTable) -> None:
    m = len(table.rows[0].v) if table.rows else 0
    header = ["t"] + [f"v_{i}" for i in range(m)] + ["eps", "quotient", "stderr", "slope", "threshold"]
    write_csv(path, header, table.csv_rows())
