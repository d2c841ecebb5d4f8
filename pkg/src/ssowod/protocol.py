"""Incremental open-world task protocol: data assembly, per-task training, inference, evaluation."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .alignment import MappingNetwork
from .config import RunConfig
from .data.images import ImageStore
from .data.manifest import UNKNOWN, DatasetManifest, InstanceAnnotation
from .data.splits import assert_no_leakage, generate_task_splits
from .data.synthetic import SyntheticConfig, SyntheticShapes
from .errors import ParameterError, ProtocolError
from .evaluation import DetectionRecord, MetricReport, map_report
from .geometry import as_box, box_iou
from .model import Detector, DetectorConfig, clone_detached, extend_known_classes, init_detector, parameter_hash, save_checkpoint
from .schedule import KnownClassRegistry, TaskSchedule
from .training import JsonlLogger, StepLogger, finetune_labeled, train_alignment, train_supervised

log = logging.getLogger(__name__)


def schedule_from_config(cfg: RunConfig) -> TaskSchedule:
    return TaskSchedule.from_groups([t.classes for t in cfg.data.schedule], [t.fraction for t in cfg.data.schedule])


@dataclass
class TaskData:
    """Everything a run needs besides the config: per-task training manifests, the test set, pixels."""

    schedule: TaskSchedule
    train: list[DatasetManifest]
    test: DatasetManifest
    store: ImageStore

    @property
    def categories(self) -> tuple[str, ...]:
        return self.test.categories


def build_task_data(cfg: RunConfig) -> TaskData:
    schedule = schedule_from_config(cfg)
    if cfg.data.synthetic is not None:
        s = cfg.data.synthetic
        common = dict(
            num_classes=s.num_classes, min_instances=s.min_instances, max_instances=s.max_instances,
            image_size=cfg.detector.input_size, min_size=s.min_size, max_size=s.max_size, rotate=s.rotate,
            oriented=cfg.detector.oriented,
        )
        train_cfg = SyntheticConfig(num_images=s.num_images, seed=cfg.seed, **common)
        test_cfg = SyntheticConfig(num_images=s.num_test_images, seed=cfg.seed + 100_003, **common)
        full = SyntheticShapes(train_cfg).manifest()
        test = SyntheticShapes(test_cfg).manifest(first_id=10_000_000)
        store = ImageStore(cfg.detector.input_size, train_cfg)
    else:
        full = DatasetManifest.load(cfg.data.train_manifest)
        test = DatasetManifest.load(cfg.data.test_manifest)
        store = ImageStore.for_manifest(full, cfg.detector.input_size, cfg.data.image_root)
    return TaskData(schedule, generate_task_splits(full, schedule, seed=cfg.seed), test, store)


def remap_for_eval(annotations: Sequence[InstanceAnnotation], registry: KnownClassRegistry, categories: Sequence[str]) -> list[InstanceAnnotation]:
    """Known labels kept, future-task labels become UNKNOWN, unscheduled classes dropped."""
    known, future = set(registry.known), set(registry.future)
    out = []
    for a in annotations:
        name = categories[a.label] if a.label >= 0 else None
        if name in known:
            out.append(a)
        elif name in future or a.label == UNKNOWN:
            out.append(InstanceAnnotation(a.image_id, UNKNOWN, a.box))
    return out


@torch.no_grad()
def predict(state: Detector, images, top_k: int, categories: Optional[Sequence[str]] = None, image_ids: Optional[Sequence[int]] = None) -> list[list[DetectionRecord]]:
    """Batched inference: per image, the ``top_k`` queries by ``p(label) * objectness``.

    Labels are category ids in ``categories`` (default: the model's own
    known-class order) or UNKNOWN for the last classifier column.
    """
    M = state.config.num_queries
    if not 1 <= top_k <= M:
        raise ParameterError(f"top_k {top_k} outside 1..{M}")
    was_training = state.training
    state.eval()
    from .model import forward

    out = forward(state, images)
    if was_training:
        state.train()
    names = list(categories) if categories is not None else list(state.class_names)
    known = state.class_names or [str(i) for i in range(state.num_classes - 1)]
    col_to_label = [names.index(n) if n in names else i for i, n in enumerate(known)] + [UNKNOWN]
    prob = out.class_logits.softmax(-1)
    best_p, best_c = prob.max(-1)
    scores = best_p * torch.sigmoid(out.objectness_logits)
    oriented = state.config.oriented
    results = []
    for b in range(scores.shape[0]):
        order = sorted(range(M), key=lambda q: (-float(scores[b, q]), q))[:top_k]
        img = image_ids[b] if image_ids is not None else b
        results.append(
            [
                DetectionRecord(img, col_to_label[int(best_c[b, q])], float(scores[b, q]), as_box(out.boxes[b, q].tolist(), oriented))
                for q in order
            ]
        )
    return results


def infer(state: Detector, image, top_k: int, categories: Optional[Sequence[str]] = None) -> list[DetectionRecord]:
    return predict(state, image, top_k, categories)[0]


def evaluate(state: Detector, data: TaskData, t: int, cfg: RunConfig, batch_size: int = 32) -> tuple[MetricReport, list[DetectionRecord]]:
    registry = data.schedule.registry(t)
    test = data.test
    dets: list[DetectionRecord] = []
    ids = test.image_ids
    for s in range(0, len(ids), batch_size):
        chunk = ids[s : s + batch_size]
        pixels = np.stack([data.store.load(test.image(i)) for i in chunk])
        for per_image in predict(state, pixels, cfg.eval.top_k, data.categories, chunk):
            dets.extend(per_image)
    gts = remap_for_eval(list(test.all_instances()), registry, data.categories)
    report = map_report(
        dets, gts, registry, data.categories, cfg.eval.iou_threshold, box_iou, cfg.eval.top_k, cfg.fingerprint()
    )
    return report, dets


def random_proposal_recall(dets: Sequence[DetectionRecord], gts: Sequence[InstanceAnnotation], size_range, seed: int = 0, iou_threshold: float = 0.5) -> Optional[float]:
    """U-Recall of a baseline that replaces every UNKNOWN detection with a uniformly random box."""
    from .evaluation import unknown_recall
    from .geometry import Box

    rng = np.random.default_rng(seed)
    lo, hi = size_range
    fake = []
    for d in dets:
        if d.label != UNKNOWN:
            continue
        w, h = rng.uniform(lo, hi, size=2)
        cx, cy = rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2)
        fake.append(DetectionRecord(d.image_id, UNKNOWN, float(rng.random()), Box(cx, cy, w, h)))
    return unknown_recall(fake, [g for g in gts if g.label == UNKNOWN], iou_threshold)


def detector_config(cfg: RunConfig, num_known: int) -> DetectorConfig:
    d = cfg.detector
    return DetectorConfig(
        num_queries=d.num_queries, embed_dim=d.embed_dim, num_scales=d.num_scales, num_known_classes=num_known,
        oriented=d.oriented, num_heads=d.num_heads, enc_layers=d.enc_layers, dec_layers=d.dec_layers,
        input_size=d.input_size, backbone_width=d.backbone_width,
    )


@dataclass
class TaskResult:
    state: Detector
    report: MetricReport
    detached_hash_before: Optional[str] = None
    detached_hash_after: Optional[str] = None
    mapper_changed: Optional[bool] = None
    seconds: float = 0.0


def run_task(
    t: int,
    schedule: TaskSchedule,
    prior: Optional[Detector],
    cfg: RunConfig,
    data: Optional[TaskData] = None,
    logger: Optional[StepLogger] = None,
) -> TaskResult:
    """Train task ``t`` and evaluate it on the test set.

    Task 1 is fully supervised (or, with a label fraction below 1, a
    supervised warm-up followed by the alignment and fine-tune phases).
    Later tasks extend the classifier, freeze a detached copy of the prior
    model, run the alignment phase on labeled + unlabeled images, then
    fine-tune on the labeled ones. With ``ssl.enabled = false`` the same
    epoch budget is spent on supervised training of the labeled images.
    """
    start = time.perf_counter()
    data = data or build_task_data(cfg)
    if schedule != data.schedule:
        raise ProtocolError("schedule differs from the one the task data was built with")
    registry = schedule.registry(t)
    manifest = data.train[t - 1]
    assert_no_leakage(manifest, schedule, t)
    rng = np.random.default_rng(cfg.seed * 1009 + t)
    torch.manual_seed(cfg.seed * 7919 + t)
    result = TaskResult(None, None)  # type: ignore[arg-type]

    if t == 1:
        if prior is not None:
            raise ProtocolError("task 1 starts from scratch; got a prior state")
        state = init_detector(detector_config(cfg, len(registry.current)), seed=cfg.seed, class_names=registry.current)
        state.task = 1
        train_supervised(state, manifest, data.store, registry, cfg, cfg.optim.epochs, rng, logger)
        if manifest.unlabeled_ids and cfg.ssl.enabled:
            _semi_supervised_phases(state, state, manifest, data, registry, cfg, rng, logger, result)
    else:
        if prior is None:
            raise ProtocolError(f"task {t} needs the task-{t - 1} checkpoint")
        if prior.task != t - 1:
            raise ProtocolError(f"prior state is from task {prior.task}, expected {t - 1}")
        state = extend_known_classes(prior, len(registry.current), registry.current, seed=cfg.seed + t)
        state.task = t
        if cfg.ssl.enabled:
            _semi_supervised_phases(state, prior, manifest, data, registry, cfg, rng, logger, result)
        else:
            epochs = cfg.optim.align_epochs + cfg.optim.finetune_epochs
            train_supervised(state, manifest, data.store, registry, cfg, epochs, rng, logger)

    state.eval()
    result.state = state
    result.report, _ = evaluate(state, data, t, cfg)
    result.seconds = time.perf_counter() - start
    return result


def _semi_supervised_phases(state, reference, manifest, data, registry, cfg, rng, logger, result: TaskResult):
    detached = clone_detached(reference)
    result.detached_hash_before = parameter_hash(detached)
    mapper = MappingNetwork(state.config.embed_dim).to(next(state.parameters()).dtype)
    mapper_before = parameter_hash(mapper)
    train_alignment(state, detached, mapper, manifest, data.store, registry, cfg, cfg.optim.align_epochs, rng, logger)
    result.detached_hash_after = parameter_hash(detached)
    result.mapper_changed = parameter_hash(mapper) != mapper_before
    if manifest.labeled_ids:
        finetune_labeled(state, manifest, data.store, registry, cfg, cfg.optim.finetune_epochs, rng, logger, detached)


def task_dir(out: str | Path, t: int) -> Path:
    return Path(out) / f"task_{t}"


def save_task(out: str | Path, result: TaskResult, cfg: RunConfig) -> Path:
    """Write ``task_<t>/{checkpoint.pt, report.json, config.json}``."""
    d = task_dir(out, result.state.task)
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(d / "checkpoint.pt", result.state, {"config": cfg.model_dump(mode="json")})
    result.report.save(d / "report.json")
    cfg.save(d / "config.json")
    meta = {
        "seconds": result.seconds,
        "detached_hash_before": result.detached_hash_before,
        "detached_hash_after": result.detached_hash_after,
        "mapper_changed": result.mapper_changed,
    }
    (d / "run_meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return d


def run_schedule(cfg: RunConfig, out: Optional[str | Path] = None, data: Optional[TaskData] = None, upto: Optional[int] = None) -> list[TaskResult]:
    data = data or build_task_data(cfg)
    results = []
    prior = None
    logger = JsonlLogger(Path(out) / "train_log.jsonl") if out is not None else None
    try:
        for t in range(1, (upto or data.schedule.num_tasks) + 1):
            res = run_task(t, data.schedule, prior, cfg, data, logger)
            if out is not None:
                save_task(out, res, cfg)
            results.append(res)
            prior = res.state
    finally:
        if logger is not None:
            logger.close()
    return results
