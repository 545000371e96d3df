"""CSV and JSON persistence.

CSV files carry a header row and full double precision (17 significant
digits). JSON reports are written with sorted keys so identical results give
identical bytes.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

__all__ = [
    "fmt",
    "write_csv",
    "read_csv",
    "write_json",
    "to_jsonable",
    "write_kernel_csv",
    "write_strategy_csv",
    "read_strategy_csv",
    "write_report_csv",
]


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(x) for x in row])


def read_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        data = np.array([[float(x) for x in row] for row in r if row])
    return header, data


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    return obj


def write_json(path, obj) -> None:
    text = json.dumps(to_jsonable(obj), sort_keys=True, indent=2, allow_nan=False)
    Path(path).write_text(text + "\n")


def write_kernel_csv(path, kernel) -> None:
    n = kernel.P1.shape[1]
    ij = [(i, j) for i in range(n) for j in range(n)]
    header = (
        ["node", "t"]
        + [f"P1_{i}{j}" for i, j in ij]
        + [f"P2_{i}{j}" for i, j in ij]
        + [f"P3_{i}" for i in range(n)]
        + [f"P4_{i}" for i in range(n)]
    )
    rows = (
        [k, t, *kernel.P1[k].ravel(), *kernel.P2[k].ravel(), *kernel.P3[k], *kernel.P4[k]]
        for k, t in enumerate(kernel.grid.nodes)
    )
    write_csv(path, header, rows)


def write_strategy_csv(path, strategy) -> None:
    """Half-grid samples (nodes and midpoints), so a reload replays exactly."""
    _, m, n = strategy.theta_half.shape
    header = ["t"] + [f"theta_{i}{j}" for i in range(m) for j in range(n)] + [f"phi_{i}" for i in range(m)]
    rows = (
        [t, *strategy.theta_half[j].ravel(), *strategy.phi_half[j]]
        for j, t in enumerate(strategy.grid.half_nodes)
    )
    write_csv(path, header, rows)


def read_strategy_csv(path, problem, kind: str):
    """Load a strategy CSV (half-grid or node rows) for ``problem``."""
    from .representation import StrategyPair

    header, data = read_csv(path)
    m, n = problem.m, problem.n
    if data.ndim != 2 or data.shape[1] != 1 + m * n + m:
        raise ValueError(f"{path}: expected {1 + m * n + m} columns for m={m}, n={n}")
    theta = data[:, 1 : 1 + m * n].reshape(-1, m, n)
    phi = data[:, 1 + m * n :]
    return StrategyPair.from_paths(problem.grid, theta, phi, kind)


def write_report_csv(path, report) -> None:
    header = ["node", "t", "second_order_margin", "first_order_residual", "range_slack_gain", "range_slack_affine"]
    rows = zip(
        range(len(report.times)),
        report.times,
        report.second_order_margin,
        report.first_order_residual,
        report.range_slack_gain,
        report.range_slack_affine,
    )
    write_csv(path, header, rows)
