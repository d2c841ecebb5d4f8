import json

import pytest
import yaml

from ssowod.data.manifest import UNKNOWN, InstanceAnnotation
from ssowod.desk import DESK_CONFIG, DeskOutcome, summarize
from ssowod.errors import DataError
from ssowod.evaluation import DetectionRecord, MetricReport
from ssowod.geometry import Box
from ssowod.protocol import random_proposal_recall
from ssowod.report import grid_markdown, load_grid, merge_runs, plot_grid

from conftest import ROOT


def test_desk_yaml_matches_builtin_config():
    assert yaml.safe_load((ROOT / "configs" / "desk.yaml").read_text()) == DESK_CONFIG


def _outcome(seed, **kw):
    base = dict(task1_mAP=0.5, task1_u_recall=0.2, random_u_recall=0.1, ssl_prev=0.3, ssl_cur=0.2, ssl_both=0.25,
                sup_prev=0.0, sup_cur=0.2, sup_both=0.1, seconds=1.0)
    base.update(kw)
    return DeskOutcome(seed=seed, **base)


def test_summarize_averages_then_checks():
    s = summarize([_outcome(0), _outcome(1, task1_u_recall=0.1, ssl_prev=0.2)])
    assert s["task1_u_recall"] == pytest.approx(0.15) and s["ssl_prev"] == pytest.approx(0.25)
    assert s["checks"] == {"u_recall_vs_random": False, "ssl_vs_supervised": True, "prev_retention": False}


def test_random_baseline_uses_one_box_per_unknown_detection():
    gts = [InstanceAnnotation(0, UNKNOWN, Box(0.5, 0.5, 0.98, 0.98))]
    dets = [DetectionRecord(0, 0, 0.9, Box(0.5, 0.5, 0.2, 0.2))]
    assert random_proposal_recall(dets, gts, (0.1, 0.2)) == 0.0  # no UNKNOWN detections, no proposals
    dets.append(DetectionRecord(0, UNKNOWN, 0.5, Box(0.5, 0.5, 0.2, 0.2)))
    assert random_proposal_recall(dets, gts, (0.97, 0.99), seed=1) == 1.0
    assert random_proposal_recall(dets, gts, (0.1, 0.2), seed=3) == random_proposal_recall(dets, gts, (0.1, 0.2), seed=3)


def _run(tmp_path, name, agg, ap):
    d = tmp_path / name
    (d / "task_1").mkdir(parents=True)
    (d / "config.json").write_text(json.dumps({"name": name, "seed": 0, "pseudo": {"aggregation": agg, "k": 3}}))
    MetricReport(1, {"a": ap}, None, ap, ap, 0.1).save(d / "task_1" / "report.json")
    return d


def test_merge_lists_only_differing_keys(tmp_path):
    grid = merge_runs([_run(tmp_path, "x", "mean", 0.5), _run(tmp_path, "y", "max", 0.25)])
    assert grid["factors"] == ["pseudo.aggregation"] and grid["tasks"] == [1]
    assert grid["rows"][1]["cells"]["1"] == {"prev": None, "cur": 0.25, "both": 0.25, "u_recall": 0.1}
    md = grid_markdown(grid)
    assert "aggregation=max" in md and "25.00" in md and "| - |" in md


def test_load_grid_wraps_a_single_report(tmp_path):
    path = _run(tmp_path, "x", "mean", 0.5) / "task_1" / "report.json"
    grid = load_grid(path)
    assert grid["rows"][0]["cells"]["1"]["both"] == 0.5
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(DataError):
        load_grid(bad)
    with pytest.raises(DataError):
        plot_grid({"kind": "task_grid", "tasks": [], "factors": [], "rows": []}, tmp_path / "e.png")
    with pytest.raises(DataError):
        merge_runs([tmp_path / "x" / "task_1"])  # no config.json there
