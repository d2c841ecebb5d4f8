"""``ssowod`` command line: split, train, eval, report, plot.

Exit codes: 0 success, 2 usage or config error, 3 data error (including
missing input paths), 4 protocol error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import yaml

from .errors import ConfigError, DataError, OWODError, ParameterError, ProtocolError

log = logging.getLogger("ssowod")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PROTOCOL = 0, 2, 3, 4

SCHEDULE_PRESETS = ("owod-s-split1", "owod-s-split2")


def _schedule(arg: str):
    from .schedule import OWOD_S_SPLIT1, OWOD_S_SPLIT2, TaskSchedule

    if arg == "owod-s-split1":
        return OWOD_S_SPLIT1
    if arg == "owod-s-split2":
        return OWOD_S_SPLIT2
    if not Path(arg).exists():
        raise DataError(f"schedule file not found: {arg}")
    return TaskSchedule.load(arg)


def _manifest(path: str, fmt: str):
    from .data import DatasetManifest, parse_coco, parse_dota

    if not Path(path).exists():
        raise DataError(f"manifest not found: {path}")
    if fmt == "coco":
        return parse_coco(path)
    if fmt == "dota":
        return parse_dota(path)
    return DatasetManifest.load(path)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def cmd_split(args) -> int:
    from .data import generate_task_splits
    from .schedule import TaskSchedule, TaskSpec

    manifest = _manifest(args.manifest, args.format)
    schedule = _schedule(args.schedule)
    if args.fraction is not None:
        # --fraction applies to every task after the first
        tasks = [schedule.tasks[0]] + [TaskSpec(s.classes, args.fraction) for s in schedule.tasks[1:]]
        schedule = TaskSchedule(tuple(tasks))
    splits = generate_task_splits(manifest, schedule, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    schedule.save(out / "schedule.json")
    summary = {}
    for t, m in enumerate(splits, start=1):
        m.save(out / f"task_{t}.json")
        summary[str(t)] = {
            "images": len(m.images),
            "labeled": len(m.labeled_ids),
            "unlabeled": len(m.unlabeled_ids),
            "achieved_proportions": m.metadata.get("achieved_proportions", {}),
        }
    _write_json(out / "split_config.json", {
        "manifest": args.manifest, "format": args.format, "schedule": schedule.to_dict(),
        "fraction": args.fraction, "seed": args.seed,
    })
    _write_json(out / "split_summary.json", summary)
    print(json.dumps(summary, indent=1, sort_keys=True))
    return EXIT_OK


def _parse_overrides(items: Sequence[str]) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    return out


def _load_run_config(args):
    from .config import load_config

    if not Path(args.config).exists():
        raise DataError(f"config not found: {args.config}")
    cfg = load_config(args.config)
    overrides = _parse_overrides(args.override)
    return cfg.with_overrides(overrides) if overrides else cfg


def _prior_for(t: int, out: Path, resume: Optional[str], cfg):
    from .model import load_checkpoint

    path = Path(resume) if resume else out / f"task_{t - 1}" / "checkpoint.pt"
    if not path.exists():
        raise ProtocolError(f"task {t} needs the task-{t - 1} checkpoint; none at {path}")
    state, extra = load_checkpoint(path)
    saved = extra.get("config", {}).get("data", {}).get("schedule")
    if saved is not None and saved != cfg.model_dump(mode="json")["data"]["schedule"]:
        raise ProtocolError(f"{path} was trained with a different task schedule")
    return state


def cmd_train(args) -> int:
    from .ablation import run_ablation
    from .protocol import build_task_data, run_task, save_task
    from .training import JsonlLogger

    cfg = _load_run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    if args.ablation:
        grid = run_ablation(cfg, args.ablation, out, upto=args.task)
        print(json.dumps({"ablation": args.ablation, "rows": len(grid["rows"])}))
        return EXIT_OK
    data = build_task_data(cfg)
    if args.task is not None and not 1 <= args.task <= data.schedule.num_tasks:
        raise ParameterError(f"--task {args.task} outside 1..{data.schedule.num_tasks}")
    tasks = [args.task] if args.task is not None else list(range(1, data.schedule.num_tasks + 1))
    prior = None
    if tasks[0] > 1:
        prior = _prior_for(tasks[0], out, args.resume, cfg)
    logger = JsonlLogger(out / "train_log.jsonl")
    try:
        for t in tasks:
            res = run_task(t, data.schedule, prior, cfg, data, logger)
            d = save_task(out, res, cfg)
            r = res.report
            print(json.dumps({"task": t, "dir": str(d), "mAP_prev": r.mAP_prev, "mAP_cur": r.mAP_cur,
                              "mAP_both": r.mAP_both, "u_recall": r.u_recall, "seconds": round(res.seconds, 1)}))
            prior = res.state
    finally:
        logger.close()
    return EXIT_OK


def cmd_eval(args) -> int:
    from .config import validate_config
    from .data import DatasetManifest, ImageStore
    from .model import load_checkpoint
    from .protocol import TaskData, build_task_data, evaluate

    if not Path(args.checkpoint).exists():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    state, extra = load_checkpoint(args.checkpoint)
    if "config" not in extra:
        raise ProtocolError(f"{args.checkpoint} carries no run config")
    cfg = validate_config(extra["config"])
    t = args.task if args.task is not None else state.task
    if t != state.task:
        raise ProtocolError(f"checkpoint is from task {state.task}, asked to evaluate task {t}")
    if args.manifest:
        if not Path(args.manifest).exists():
            raise DataError(f"manifest not found: {args.manifest}")
        from .protocol import schedule_from_config

        test = DatasetManifest.load(args.manifest)
        data = TaskData(schedule_from_config(cfg), [], test, ImageStore.for_manifest(test, cfg.detector.input_size, cfg.data.image_root))
    else:
        data = build_task_data(cfg)
    report, _ = evaluate(state, data, t, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    cfg.save(out.parent / "config.json")
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import merge_runs, save_grid

    grid = merge_runs(args.runs)
    path = save_grid(grid, args.out)
    print(path.with_suffix(".md").read_text(), end="")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .report import load_grid, plot_grid, read_loss_log

    grid = load_grid(args.report)
    loss = read_loss_log(args.log) if args.log else None
    print(plot_grid(grid, args.out, loss))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssowod", description="Semi-supervised open-world detection experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("split", help="write per-task manifests")
    s.add_argument("--manifest", required=True)
    s.add_argument("--format", choices=("manifest", "coco", "dota"), default="manifest")
    s.add_argument("--schedule", required=True, help=f"schedule file or one of {', '.join(SCHEDULE_PRESETS)}")
    s.add_argument("--fraction", type=float, help="labeled fraction for every task after the first")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="train one task (or the whole schedule)")
    s.add_argument("--config", required=True)
    s.add_argument("--task", type=int)
    s.add_argument("--resume", help="previous-task checkpoint (default: <out>/task_<t-1>/checkpoint.pt)")
    s.add_argument("--out", required=True)
    s.add_argument("--override", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")
    s.add_argument("--ablation", choices=("aggregation", "augment", "scorer"), help="run every variant of one ablation")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="recompute the metric report of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", help="test manifest (default: the one the run config describes)")
    s.add_argument("--task", type=int)
    s.add_argument("--out", required=True, help="report JSON path")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="merge run directories into one grid")
    s.add_argument("--runs", nargs="+", required=True)
    s.add_argument("--out", required=True, help="grid JSON path (a .md table is written next to it)")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("plot", help="render a merged report (and optionally a loss log)")
    s.add_argument("--report", required=True)
    s.add_argument("--log", help="train_log.jsonl")
    s.add_argument("--out", required=True, help="image path (.png or .svg)")
    s.set_defaults(func=cmd_plot)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except OWODError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
