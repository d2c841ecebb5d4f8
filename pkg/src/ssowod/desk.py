"""Desk-scale two-task experiment on synthetic shapes.

Task 1 learns two shape classes from fully labeled images; task 2 adds two
more with half of the images labeled. Each seed trains task 1 once and
then task 2 twice from the same task-1 state: with the semi-supervised
phases and supervised-only. The numbers that come out are the ones the
directional checks compare (U-Recall against random proposals, Both-mAP
with and without the semi-supervised phases, retention of Prev-mAP).
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig, validate_config
from .data.manifest import UNKNOWN
from .protocol import TaskData, build_task_data, evaluate, random_proposal_recall, remap_for_eval, run_task

DESK_CONFIG: dict = {
    "name": "desk",
    "seed": 0,
    "detector": {"num_queries": 30, "embed_dim": 64, "input_size": 64, "enc_layers": 1, "dec_layers": 3},
    "optim": {
        "lr": 5e-4, "epochs": 14, "align_epochs": 3, "finetune_epochs": 2, "batch_size": 8, "grad_clip": 1.0,
    },
    "pseudo": {"k": 3, "guard_threshold": 0.15},
    "loss": {"cur_weight": 0.05},
    "eval": {"top_k": 10},
    "data": {
        "synthetic": {"num_classes": 4, "num_images": 600, "num_test_images": 100},
        "schedule": [
            {"classes": ["square", "circle"], "fraction": 1.0},
            {"classes": ["triangle", "cross"], "fraction": 0.5},
        ],
    },
}


def desk_config(seed: int = 0, overrides: Optional[dict] = None) -> RunConfig:
    cfg = validate_config(DESK_CONFIG).with_overrides({"seed": seed})
    return cfg.with_overrides(overrides) if overrides else cfg


@dataclass
class DeskOutcome:
    seed: int
    task1_mAP: float
    task1_u_recall: float
    random_u_recall: float
    ssl_prev: float
    ssl_cur: float
    ssl_both: float
    sup_prev: float
    sup_cur: float
    sup_both: float
    seconds: float

    def as_dict(self) -> dict:
        return asdict(self)


def run_desk(cfg: RunConfig, data: Optional[TaskData] = None) -> DeskOutcome:
    start = time.perf_counter()
    data = data or build_task_data(cfg)
    t1 = run_task(1, data.schedule, None, cfg, data)
    _, dets = evaluate(t1.state, data, 1, cfg)
    gts = remap_for_eval(list(data.test.all_instances()), data.schedule.registry(1), data.categories)
    s = cfg.data.synthetic
    size_range = (s.min_size, s.max_size) if s is not None else (0.05, 0.5)
    rand = random_proposal_recall(dets, gts, size_range, seed=cfg.seed)
    ssl = run_task(2, data.schedule, t1.state, cfg.with_overrides({"ssl.enabled": True}), data)
    sup = run_task(2, data.schedule, t1.state, cfg.with_overrides({"ssl.enabled": False}), data)
    return DeskOutcome(
        seed=cfg.seed,
        task1_mAP=t1.report.mAP_both or 0.0,
        task1_u_recall=t1.report.u_recall or 0.0,
        random_u_recall=rand or 0.0,
        ssl_prev=ssl.report.mAP_prev or 0.0,
        ssl_cur=ssl.report.mAP_cur or 0.0,
        ssl_both=ssl.report.mAP_both or 0.0,
        sup_prev=sup.report.mAP_prev or 0.0,
        sup_cur=sup.report.mAP_cur or 0.0,
        sup_both=sup.report.mAP_both or 0.0,
        seconds=time.perf_counter() - start,
    )


def summarize(outcomes: Sequence[DeskOutcome]) -> dict:
    """Seed means plus the three directional checks."""
    mean = {k: float(np.mean([getattr(o, k) for o in outcomes])) for k in DeskOutcome.__dataclass_fields__ if k != "seed"}
    mean["checks"] = {
        "u_recall_vs_random": mean["task1_u_recall"] >= 2 * mean["random_u_recall"],
        "ssl_vs_supervised": mean["ssl_both"] >= mean["sup_both"],
        "prev_retention": mean["ssl_prev"] >= 0.6 * mean["task1_mAP"],
    }
    return mean
