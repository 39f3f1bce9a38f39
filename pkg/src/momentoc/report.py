"""Run outputs: delimited tables, JSON reports, and rendered figures.

Writers are atomic (write to a temp file in the destination directory, then
rename) so an interrupted run never leaves a half-written table.  Numeric
columns use the shortest round-tripping float representation, which keeps
repeated runs byte-identical; CPU time columns are the one sanctioned
exception to that determinism contract.
"""

from __future__ import annotations

import json
import os
import tempfile
from typing import Iterable, Sequence

import numpy as np


def _num(x) -> str:
    return repr(float(x))


def atomic_write_text(path, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_", text=True)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def format_values_csv(rows: Iterable[Sequence]) -> str:
    """Rows (r, J_r, cpu_seconds); the timing column is excluded from
    byte-level determinism comparisons."""
    out = ["r,J_r,cpu_seconds"]
    for r, jr, cpu in rows:
        out.append(f"{int(r)},{_num(jr)},{float(cpu):.3f}")
    return "\n".join(out) + "\n"


def write_values_csv(path, rows) -> None:
    atomic_write_text(path, format_values_csv(rows))


def format_trajectory_csv(traj, n: int, m: int) -> str:
    header = (
        ["t"]
        + [f"x{i + 1}" for i in range(n)]
        + [f"u{j + 1}" for j in range(m)]
        + ["running_cost"]
    )
    lines = [",".join(header)]
    for k in range(len(traj.times)):
        cells = [_num(traj.times[k])]
        cells.extend(_num(v) for v in np.atleast_1d(traj.states[k]))
        cells.extend(_num(v) for v in np.atleast_1d(traj.controls[k]))
        cells.append(_num(traj.running_cost[k]))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def write_trajectory_csv(path, traj, n: int, m: int) -> None:
    atomic_write_text(path, format_trajectory_csv(traj, n, m))


def format_gap_csv(rows: Iterable[Sequence]) -> str:
    """Rows (r, V_u, lower_bound, gap_percent) for the closed-loop gap table."""
    out = ["r,V_u,lower_bound,gap_percent"]
    for r, vu, lb, gap in rows:
        out.append(f"{int(r)},{_num(vu)},{_num(lb)},{_num(gap)}")
    return "\n".join(out) + "\n"


def write_gap_csv(path, rows) -> None:
    atomic_write_text(path, format_gap_csv(rows))


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_values_figure(path, rows) -> None:
    """Lower bound against relaxation order."""
    plt = _pyplot()
    rows = list(rows)
    rs = [int(r) for r, _, _ in rows]
    js = [float(j) for _, j, _ in rows]
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ax.plot(rs, js, marker="o", color="#1f5fa8")
    ax.set_xlabel("relaxation order r")
    ax.set_ylabel("lower bound J_r")
    ax.set_xticks(rs)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def render_trajectory_figure(path, traj, n: int, m: int) -> None:
    """States, controls and running cost over time; phase portrait when n = 2."""
    plt = _pyplot()
    t = np.asarray(traj.times)
    X = np.atleast_2d(np.asarray(traj.states))
    U = np.atleast_2d(np.asarray(traj.controls))
    panels = 3 if n == 2 else 2
    fig, axes = plt.subplots(1, panels, figsize=(4.0 * panels, 3.2))
    ax = axes[0]
    for i in range(n):
        ax.plot(t, X[:, i], label=f"x{i + 1}")
    ax.set_xlabel("t")
    ax.legend(loc="best", fontsize=8)
    ax.grid(True, alpha=0.3)
    ax = axes[1]
    for j in range(m):
        ax.step(t, U[:, j], where="post", label=f"u{j + 1}", color="#b3541e")
    ax2 = ax.twinx()
    ax2.plot(t, traj.running_cost, color="#557a3c", alpha=0.7, label="cost")
    ax.set_xlabel("t")
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(True, alpha=0.3)
    if n == 2:
        ax = axes[2]
        ax.plot(X[:, 0], X[:, 1], color="#1f5fa8")
        ax.plot(X[0, 0], X[0, 1], "ko", markersize=4)
        ax.set_xlabel("x1")
        ax.set_ylabel("x2")
        ax.set_aspect("equal", adjustable="datalim")
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
