"""Command-line front end.

    tilq --config problem.json --mode solve-strategy --out results/

Writes ``report.json`` plus CSV curves into ``--out`` and prints a short
summary. The exit status is 0 when the verdict holds (always for the purely
computational ``compare`` mode), 1 when it fails and 2 on errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import export
from .classical import classical_riccati_oracle
from .kernels import BlowUpError
from .linalg import Tolerances
from .montecarlo import MCParams, PerturbationProbe, perturbation_quotients, write_quotients_csv
from .openloop import check_open, induced_control
from .problem import ProblemError, load_problem
from .representation import synthesize_rep
from .strategy import compare_rep_vs_strategy, evaluate_strategy, synthesize_strategy

MODES = ("solve-rep", "solve-strategy", "check-open", "verify-mc", "compare", "reduce-classical")
MC_MODES = ("verify-mc",)
CLASSICAL_TOL = 1e-6


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    problem_path: Path
    mode: str
    out: Path
    tol: Tolerances = field(default_factory=Tolerances)
    seed: int | None = None
    outer: int = 4096
    inner: int = 256
    candidate: Path | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.mode in MC_MODES and self.seed is None:
            raise ConfigError("a base seed is mandatory for Monte Carlo modes (--seed or mc.base_seed in the config)")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tilq", description="Equilibrium solvers and verifiers for time-inconsistent LQ control.")
    ap.add_argument("--config", required=True, type=Path, help="problem JSON file")
    ap.add_argument("--mode", required=True, choices=MODES)
    ap.add_argument("--out", required=True, type=Path, help="output directory")
    ap.add_argument("--seed", type=int, help="base seed for Monte Carlo modes")
    ap.add_argument("--paths", type=int, help="outer Monte Carlo samples (default 4096)")
    ap.add_argument("--inner", type=int, help="inner paths per outer sample (default 256)")
    ap.add_argument("--tol-psd", type=float)
    ap.add_argument("--tol-res", type=float)
    ap.add_argument("--tol-range", type=float)
    ap.add_argument("--candidate", type=Path, help="strategy or control CSV to check instead of the synthesized one")
    return ap


def build_config(args) -> RunConfig:
    """Merge command-line flags over the optional ``tolerances``/``mc`` blocks of the problem file."""
    try:
        raw = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError):
        raw = {}  # load_problem reports the precise error later
    raw = raw if isinstance(raw, dict) else {}
    tol_raw = raw.get("tolerances", {}) or {}
    mc_raw = raw.get("mc", {}) or {}
    tol = Tolerances(
        rtol=float(tol_raw.get("rtol", Tolerances.rtol)),
        psd=float(args.tol_psd if args.tol_psd is not None else tol_raw.get("psd", Tolerances.psd)),
        res=float(args.tol_res if args.tol_res is not None else tol_raw.get("res", Tolerances.res)),
        range=float(args.tol_range if args.tol_range is not None else tol_raw.get("range", Tolerances.range)),
        sym=float(tol_raw.get("sym", Tolerances.sym)),
    )
    seed = args.seed if args.seed is not None else mc_raw.get("base_seed")
    return RunConfig(
        problem_path=Path(args.config),
        mode=args.mode,
        out=Path(args.out),
        tol=tol,
        seed=None if seed is None else int(seed),
        outer=int(args.paths if args.paths is not None else mc_raw.get("outer", 4096)),
        inner=int(args.inner if args.inner is not None else mc_raw.get("inner", 256)),
        candidate=args.candidate,
    )


def _probes(problem, mode: str):
    """Probe grid: t in {0, T/4, T/2} (snapped to nodes), eps in {2h, 4h, 8h}, v = +-e_i."""
    grid = problem.grid
    h = grid.h
    eps = (2 * h, 4 * h, 8 * h)
    probes = []
    for frac in (0.0, 0.25, 0.5):
        t = grid.nodes[int(round(frac * grid.N))]
        for i in range(problem.m):
            for sign in (1.0, -1.0):
                v = np.zeros(problem.m)
                v[i] = sign
                probes.append(PerturbationProbe(t, tuple(v), eps, mode))
    return probes


def _load_candidate(cfg: RunConfig, problem, kind: str):
    return export.read_strategy_csv(cfg.candidate, problem, kind)


def _load_control(cfg: RunConfig, problem):
    """A control CSV (t, u_...) or a strategy CSV, turned into a deterministic control."""
    _, data = export.read_csv(cfg.candidate)
    if data.ndim == 2 and data.shape[1] == 1 + problem.m:
        return data[:, 1:]
    strategy = export.read_strategy_csv(cfg.candidate, problem, "open_rep")
    return induced_control(problem, strategy)


def _write_report(out: Path, report: dict) -> None:
    export.write_json(out / "report.json", report)


def run(cfg: RunConfig) -> int:
    """Execute one mode; returns the exit status."""
    problem = load_problem(cfg.problem_path)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    tol = cfg.tol
    report = {"mode": cfg.mode, "problem": problem.meta.get("name", cfg.problem_path.name), "N": problem.N, "T": problem.T}
    report["symmetry_correction_on_load"] = problem.symmetry_correction

    if cfg.mode in ("solve-rep", "solve-strategy"):
        if cfg.mode == "solve-rep":
            strategy, kernel, rep = synthesize_rep(problem, tol)
        else:
            strategy, kernel, rep = synthesize_strategy(problem, tol)
        if cfg.candidate is not None:
            raise ConfigError("--candidate is only used by check-open and verify-mc")
        export.write_strategy_csv(out / "strategy.csv", strategy)
        export.write_kernel_csv(out / "kernel.csv", kernel)
        export.write_report_csv(out / "margins.csv", rep)
        report["report"] = rep.summary()
        verdict = rep.verdict

    elif cfg.mode == "check-open":
        if cfg.candidate is not None:
            u = _load_control(cfg, problem)
            report["candidate_source"] = str(cfg.candidate)
        else:
            strategy, _, _ = synthesize_rep(problem, tol)
            u = induced_control(problem, strategy)
            report["candidate_source"] = "representation gain applied along the mean trajectory"
            if np.any(strategy.theta) and (np.any(problem.C) or np.any(problem.D)):
                report["candidate_warning"] = (
                    "nonzero gain with state-dependent noise: the equilibrium control is random, "
                    "so a deterministic control built from it is not expected to pass"
                )
        rep = check_open(problem, u, tol, seed=cfg.seed or 0)
        export.write_report_csv(out / "margins.csv", rep)
        report["report"] = rep.summary()
        verdict = rep.verdict

    elif cfg.mode == "verify-mc":
        if cfg.candidate is not None:
            strategy = _load_candidate(cfg, problem, "closed_strategy")
            alg = evaluate_strategy(problem, strategy, tol=tol)
        else:
            strategy, _, alg = synthesize_strategy(problem, tol)
        mc = MCParams(base_seed=cfg.seed, outer=cfg.outer, inner=cfg.inner)
        table = perturbation_quotients(problem, strategy, _probes(problem, "closed"), mc)
        write_quotients_csv(out / "quotients.csv", table)
        export.write_strategy_csv(out / "strategy.csv", strategy)
        report["report"] = alg.summary()
        report["mc"] = {
            "base_seed": cfg.seed,
            "outer": cfg.outer,
            "inner": cfg.inner,
            "verdict": table.verdict,
            "slope_tol": table.slope_tol,
            "min_quotient_over_stderr": min(r.quotient / r.stderr if r.stderr > 0 else 0.0 for r in table.rows),
            "note": "finite-epsilon surrogate for the lim-inf condition",
        }
        verdict = table.verdict

    elif cfg.mode == "compare":
        div = compare_rep_vs_strategy(problem, tol)
        export.write_csv(
            out / "divergence.csv",
            ["node", "t", "kernel_gap", "gain_gap", "rep_asymmetry", "strategy_asymmetry"],
            zip(range(problem.N + 1), div.times, div.kernel_gap, div.gain_gap, div.rep_asymmetry, div.strategy_asymmetry),
        )
        report["divergence"] = div.summary()
        report["rep_verdict"] = div.rep_report.verdict
        report["strategy_verdict"] = div.strategy_report.verdict
        verdict = True

    else:  # reduce-classical
        oracle = classical_riccati_oracle(problem)
        strategy, kernel, rep = synthesize_strategy(problem, tol)
        rstrategy, rkernel, _ = synthesize_rep(problem, tol)
        gain_err = float(np.max(np.abs(strategy.theta - oracle.gain)))
        rep_gain_err = float(np.max(np.abs(rstrategy.theta - oracle.gain)))
        kernel_err = float(np.max(np.abs(kernel.P1 + oracle.P)))
        report["classical"] = {
            "gain_match_error": gain_err,
            "rep_gain_match_error": rep_gain_err,
            "kernel_match_error": kernel_err,
            "tolerance": CLASSICAL_TOL,
        }
        report["report"] = rep.summary()
        export.write_csv(
            out / "classical.csv",
            ["node", "t"] + [f"gain_{i}" for i in range(problem.m * problem.n)] + [f"oracle_gain_{i}" for i in range(problem.m * problem.n)],
            ([k, t, *strategy.theta[k].ravel(), *oracle.gain[k].ravel()] for k, t in enumerate(problem.grid.nodes)),
        )
        verdict = max(gain_err, rep_gain_err, kernel_err) <= CLASSICAL_TOL

    report["verdict"] = bool(verdict)
    _write_report(out, report)
    _print_summary(report)
    return 0 if verdict else 1


def _print_summary(report: dict) -> None:
    print(f"mode: {report['mode']}  problem: {report['problem']}  N={report['N']}")
    inner = report.get("report", {})
    if "candidate_warning" in report:
        print(f"  warning: {report['candidate_warning']}")
    for key in ("min_second_order_margin", "max_first_order_residual", "max_range_slack_gain", "max_range_slack_affine"):
        if key in inner:
            print(f"  {key}: {inner[key]:.3e}")
    for note in inner.get("notes", []):
        print(f"  note: {note}")
    for block in ("mc", "classical", "divergence"):
        if block in report:
            for key, val in report[block].items():
                print(f"  {block}.{key}: {val}")
    print(f"verdict: {'PASS' if report['verdict'] else 'FAIL'}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = build_config(args)
        return run(cfg)
    except (ProblemError, ConfigError, BlowUpError, ValueError, OSError, np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"tilq: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
