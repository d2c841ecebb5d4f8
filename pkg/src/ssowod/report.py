"""Merging per-task reports of several runs into one grid, and plotting it.

A run directory is what ``train`` writes: ``config.json`` at the top and
``task_<t>/report.json`` per finished task. The merged grid is plain JSON::

    {
      "kind": "task_grid",
      "tasks": [1, 2],
      "factors": ["pseudo.aggregation"],       # config keys that differ between runs
      "rows": [
        {"run": "runs/mean", "name": "...", "variant": {"pseudo.aggregation": "mean"},
         "cells": {"1": {"prev": null, "cur": 0.5, "both": 0.5, "u_recall": 0.1}, ...}}
      ]
    }
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Optional, Sequence

from .errors import DataError
from .evaluation import MetricReport

GRID_KIND = "task_grid"
IGNORED_FACTORS = ("name", "seed")


def _flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and v and key != "augment.params":
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _cell(report: MetricReport) -> dict:
    return {
        "prev": report.mAP_prev,
        "cur": report.mAP_cur,
        "both": report.mAP_both,
        "u_recall": report.u_recall if report.has_u_recall else None,
    }


def load_run(run_dir: str | Path) -> dict:
    """Config and per-task reports of one run directory."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise DataError(f"run directory not found: {run_dir}")
    cfg_path = run_dir / "config.json"
    if not cfg_path.exists():
        raise DataError(f"{run_dir}: no config.json (not a run directory?)")
    reports = {}
    for rp in sorted(run_dir.glob("task_*/report.json")):
        t = int(rp.parent.name.split("_", 1)[1])
        reports[t] = MetricReport.load(rp)
    return {"run": str(run_dir), "config": json.loads(cfg_path.read_text()), "reports": reports}


def merge_runs(run_dirs: Sequence[str | Path]) -> dict:
    """One row per run, one cell per task; ``factors`` are the config keys that differ."""
    runs = [load_run(d) for d in run_dirs]
    if not runs:
        raise DataError("no runs to merge")
    flat = [_flatten(r["config"]) for r in runs]
    keys = sorted(set().union(*flat))
    factors = [
        k for k in keys
        if k not in IGNORED_FACTORS and len({json.dumps(f.get(k), sort_keys=True) for f in flat}) > 1
    ]
    tasks = sorted(set().union(*(r["reports"].keys() for r in runs)))
    rows = []
    for r, f in zip(runs, flat):
        rows.append(
            {
                "run": r["run"],
                "name": r["config"].get("name", ""),
                "variant": {k: f.get(k) for k in factors},
                "cells": {str(t): _cell(r["reports"][t]) for t in sorted(r["reports"])},
            }
        )
    return {"kind": GRID_KIND, "tasks": tasks, "factors": factors, "rows": rows}


def _fmt(v: Optional[float]) -> str:
    return "-" if v is None else f"{100 * v:.2f}"


def _variant_label(row: dict) -> str:
    if not row["variant"]:
        return row["name"] or row["run"]
    parts = []
    for k, v in row["variant"].items():
        if isinstance(v, list):
            v = "+".join(str(x) for x in v) or "none"
        parts.append(f"{k.split('.')[-1]}={v}")
    return ", ".join(parts)


def grid_markdown(grid: dict) -> str:
    """Prev/Cur/Both mAP and U-Recall (percent) per task, one line per run."""
    tasks = grid["tasks"]
    head = ["run"]
    for t in tasks:
        head += [f"T{t} U-Recall", f"T{t} Prev", f"T{t} Cur", f"T{t} Both"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for row in grid["rows"]:
        cells = [_variant_label(row)]
        for t in tasks:
            c = row["cells"].get(str(t), {})
            cells += [_fmt(c.get("u_recall")), _fmt(c.get("prev")), _fmt(c.get("cur")), _fmt(c.get("both"))]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def save_grid(grid: dict, out: str | Path) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(grid, indent=1, sort_keys=True) + "\n")
    out.with_suffix(".md").write_text(grid_markdown(grid))
    return out


def load_grid(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"report not found: {path}")
    try:
        grid = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not JSON ({exc})") from exc
    if isinstance(grid, dict) and grid.get("kind") != GRID_KIND and "per_class_ap" in grid:
        # a single task report: wrap it as a one-row grid
        rep = MetricReport.from_dict(grid)
        grid = {"kind": GRID_KIND, "tasks": [rep.task], "factors": [], "rows": [
            {"run": str(path), "name": "", "variant": {}, "cells": {str(rep.task): _cell(rep)}}
        ]}
    if not isinstance(grid, dict) or grid.get("kind") != GRID_KIND:
        raise DataError(f"{path}: not a merged report")
    return grid


def read_loss_log(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"loss log not found: {path}")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def plot_grid(grid: dict, out: str | Path, loss_log: Optional[Sequence[dict]] = None) -> Path:
    """Both-mAP and U-Recall per task for every row (plus loss curves when a log is given)."""
    rows = grid.get("rows") or []
    if not rows or not any(row["cells"] for row in rows):
        raise DataError("report has no rows to plot")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ncols = 3 if loss_log else 2
    fig, axes = plt.subplots(1, ncols, figsize=(4.5 * ncols, 3.6))
    tasks = grid["tasks"]
    for row in rows:
        label = _variant_label(row)
        both = [row["cells"].get(str(t), {}).get("both") for t in tasks]
        rec = [row["cells"].get(str(t), {}).get("u_recall") for t in tasks]
        axes[0].plot(tasks, [float("nan") if v is None else 100 * v for v in both], marker="o", label=label)
        axes[1].plot(tasks, [float("nan") if v is None else 100 * v for v in rec], marker="o", label=label)
    axes[0].set(title="Both mAP", xlabel="task", ylabel="%")
    axes[1].set(title="U-Recall", xlabel="task", ylabel="%")
    for ax in axes[:2]:
        ax.set_xticks(tasks)
    axes[0].legend(fontsize=7)
    if loss_log:
        ax = axes[2]
        for key in ("L_c", "L_r", "L_o", "L_cur"):
            ys = [r[key] for r in loss_log if key in r]
            if any(ys):
                ax.plot(range(len(ys)), ys, label=key, linewidth=0.8)
        ax.set(title="training losses", xlabel="step", yscale="log")
        ax.legend(fontsize=7)
    fig.tight_layout()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out)
    plt.close(fig)
    return out
