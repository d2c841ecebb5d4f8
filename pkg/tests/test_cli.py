import json
from pathlib import Path

import pytest

from ssowod.cli import EXIT_DATA, EXIT_OK, EXIT_PROTOCOL, EXIT_USAGE, main
from ssowod.data import SyntheticConfig, SyntheticShapes

from conftest import ROOT

SMOKE = str(ROOT / "configs" / "smoke.yaml")


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    path = tmp_path_factory.mktemp("m") / "manifest.json"
    SyntheticShapes(SyntheticConfig(num_images=30, num_classes=4, seed=5)).manifest().save(path)
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--config", SMOKE, "--task", "1", "--out", str(out)]) == EXIT_OK
    return out


def _split(manifest, out, *extra):
    return main(["split", "--manifest", manifest, "--schedule", str(ROOT / "configs" / "schedule_shapes.yaml"),
                 "--seed", "3", "--out", str(out), *extra])


def test_split_is_byte_identical_across_runs(manifest, tmp_path):
    assert _split(manifest, tmp_path / "a") == EXIT_OK
    assert _split(manifest, tmp_path / "b") == EXIT_OK
    for name in ("task_1.json", "task_2.json", "schedule.json", "split_summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_split_fraction_one_labels_everything(manifest, tmp_path):
    assert _split(manifest, tmp_path, "--fraction", "1.0") == EXIT_OK
    summary = json.loads((tmp_path / "split_summary.json").read_text())
    assert all(v["unlabeled"] == 0 for v in summary.values())
    cfg = json.loads((tmp_path / "split_config.json").read_text())
    assert cfg["fraction"] == 1.0 and cfg["seed"] == 3


def test_exit_codes(manifest, tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["split", "--manifest", str(tmp_path / "nope.json"), "--schedule", "owod-s-split1",
                 "--out", str(tmp_path)]) == EXIT_DATA
    assert main(["train", "--config", SMOKE, "--task", "2", "--out", str(tmp_path / "fresh")]) == EXIT_PROTOCOL
    assert main(["train", "--config", SMOKE, "--task", "9", "--out", str(tmp_path / "t9")]) == EXIT_USAGE
    assert main(["train", "--config", SMOKE, "--override", "optim.lr", "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert main(["train", "--config", SMOKE, "--override", "optim.lr=-1", "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert main(["eval", "--checkpoint", str(tmp_path / "none.pt"), "--out", str(tmp_path / "r.json")]) == EXIT_DATA


def test_train_writes_resolved_config(trained):
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["name"] == "smoke" and cfg["detector"]["num_queries"] == 12
    assert cfg["optim"]["weight_decay"] is not None  # defaults filled in
    for name in ("checkpoint.pt", "report.json", "config.json", "run_meta.json"):
        assert (trained / "task_1" / name).exists()


def test_eval_twice_is_identical(trained, tmp_path):
    ck = str(trained / "task_1" / "checkpoint.pt")
    assert main(["eval", "--checkpoint", ck, "--out", str(tmp_path / "a" / "r.json")]) == EXIT_OK
    assert main(["eval", "--checkpoint", ck, "--out", str(tmp_path / "b" / "r.json")]) == EXIT_OK
    a = (tmp_path / "a" / "r.json").read_bytes()
    assert a == (tmp_path / "b" / "r.json").read_bytes()
    assert json.loads(a) == json.loads((trained / "task_1" / "report.json").read_text())
    assert (tmp_path / "a" / "config.json").exists()
    assert main(["eval", "--checkpoint", ck, "--task", "2", "--out", str(tmp_path / "c.json")]) == EXIT_PROTOCOL


def test_resume_with_other_schedule_is_refused(trained, tmp_path):
    rc = main(["train", "--config", SMOKE, "--task", "2", "--resume", str(trained / "task_1" / "checkpoint.pt"),
               "--override", "data.schedule=[{classes: [square, triangle]}, {classes: [circle, cross]}]",
               "--out", str(tmp_path)])
    assert rc == EXIT_PROTOCOL


def test_report_and_plot(trained, tmp_path):
    other = tmp_path / "other"
    assert main(["train", "--config", SMOKE, "--task", "1", "--override", "pseudo.aggregation=max",
                 "--out", str(other)]) == EXIT_OK
    grid_path = tmp_path / "grid.json"
    assert main(["report", "--runs", str(trained), str(other), "--out", str(grid_path)]) == EXIT_OK
    grid = json.loads(grid_path.read_text())
    assert grid["factors"] == ["pseudo.aggregation"]
    assert [r["variant"]["pseudo.aggregation"] for r in grid["rows"]] == ["mean", "max"]
    assert "aggregation=max" in Path(grid_path.with_suffix(".md")).read_text()
    png = tmp_path / "g.png"
    assert main(["plot", "--report", str(grid_path), "--log", str(trained / "train_log.jsonl"), "--out", str(png)]) == EXIT_OK
    assert png.stat().st_size > 0
    empty = tmp_path / "empty.json"
    empty.write_text(json.dumps({"kind": "task_grid", "tasks": [], "factors": [], "rows": []}))
    assert main(["plot", "--report", str(empty), "--out", str(tmp_path / "e.png")]) == EXIT_DATA
    assert main(["report", "--runs", str(tmp_path / "missing"), "--out", str(grid_path)]) == EXIT_DATA
