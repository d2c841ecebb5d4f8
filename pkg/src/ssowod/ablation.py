"""Ablations selected by one name: each variant is a full run in its own directory.

``aggregation`` compares mean and max scale aggregation of the pseudo-label
scores, ``augment`` the augmentation subsets, ``scorer`` the three
pseudo-label scorers. Afterwards the runs are merged into one grid.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional

from .config import RunConfig
from .errors import ConfigError
from .protocol import TaskData, run_schedule
from .report import merge_runs, save_grid

ABLATIONS: dict[str, list[tuple[str, dict]]] = {
    "aggregation": [
        ("max", {"pseudo.aggregation": "max"}),
        ("mean", {"pseudo.aggregation": "mean"}),
    ],
    "augment": [
        ("PS+SL", {"augment.enabled": ["posterize", "solarize"]}),
        ("CJ+GB+GR+PS+SL", {"augment.enabled": ["color_jitter", "gaussian_blur", "greyscale", "posterize", "solarize"]}),
        ("CJ", {"augment.enabled": ["color_jitter"]}),
        ("GB+GR", {"augment.enabled": ["gaussian_blur", "greyscale"]}),
        ("CJ+GB+GR", {"augment.enabled": ["color_jitter", "gaussian_blur", "greyscale"]}),
    ],
    "scorer": [
        ("backbone", {"pseudo.scorer": "backbone"}),
        ("encoder", {"pseudo.scorer": "encoder"}),
        ("query", {"pseudo.scorer": "query"}),
    ],
}


def run_ablation(cfg: RunConfig, factor: str, out: str | Path, data: Optional[TaskData] = None, upto: Optional[int] = None) -> dict:
    """Run every variant of ``factor`` into ``out/<variant>`` and write ``out/ablation_<factor>.json``."""
    if factor not in ABLATIONS:
        raise ConfigError(f"unknown ablation {factor!r}; choose from {sorted(ABLATIONS)}")
    out = Path(out)
    dirs = []
    for label, overrides in ABLATIONS[factor]:
        variant = cfg.with_overrides(overrides)
        run_dir = out / label
        run_dir.mkdir(parents=True, exist_ok=True)
        variant.save(run_dir / "config.json")
        run_schedule(variant, run_dir, data, upto)
        dirs.append(run_dir)
    grid = merge_runs(dirs)
    grid["ablation"] = factor
    save_grid(grid, out / f"ablation_{factor}.json")
    return grid
