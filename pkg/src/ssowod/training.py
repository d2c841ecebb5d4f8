"""Training steps and phases: supervised, semi-supervised alignment, labeled fine-tuning."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .alignment import AlignmentBatch, MappingNetwork, ssl_loss
from .config import RunConfig
from .data.augment import AugmentationSpec, augment
from .data.images import ImageStore
from .data.manifest import DatasetManifest
from .errors import DataError, FrozenModelError, LeakageError, ProtocolError
from .geometry import AnyBox, Box, OrientedBox, as_box, box_iou
from .losses import LossBreakdown, MatchWeights, detection_loss, hungarian_match, total_loss
from .model import Detector
from .pseudolabel import pseudo_label_image
from .schedule import KnownClassRegistry

log = logging.getLogger(__name__)

StepLogger = Callable[[dict], None]


@dataclass
class Target:
    labels: list[int]  # classifier columns
    boxes: torch.Tensor  # (G, 4) or (G, 5)
    box_objs: list[AnyBox]


@dataclass
class Batch:
    image_ids: list[int]
    pixels: list[np.ndarray]  # (S, S, 3) each, un-augmented
    targets: list[Target]
    labeled: list[bool]

    def tensor(self, dtype=torch.float32, pixels=None) -> torch.Tensor:
        arr = np.stack(self.pixels if pixels is None else pixels)
        return torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype)


def _target_box(box: AnyBox, oriented: bool) -> tuple[list[float], AnyBox]:
    if oriented:
        ob = box if isinstance(box, OrientedBox) else OrientedBox(box.cx, box.cy, box.w, box.h, 0.0)
        return list(ob.as_tuple()), ob
    ab = box.envelope() if isinstance(box, OrientedBox) else box
    return list(ab.as_tuple()), ab


def make_batch(
    manifest: DatasetManifest,
    image_ids: Sequence[int],
    store: ImageStore,
    registry: KnownClassRegistry,
    oriented: bool,
    allowed: Optional[set[str]] = None,
) -> Batch:
    """Collect pixels and training-visible targets.

    Every visible label is checked against ``allowed`` (default: the
    current task's group) and a :class:`LeakageError` is raised otherwise.
    """
    allowed = set(registry.current) if allowed is None else allowed
    pixels, targets, labeled = [], [], []
    for i in image_ids:
        pixels.append(store.load(manifest.image(i)))
        labels, rows, objs = [], [], []
        for ann in manifest.training_annotations(i):
            name = manifest.categories[ann.label] if ann.label >= 0 else "unknown"
            if name not in allowed:
                raise LeakageError(f"image {i}: label {name!r} reached the task-{registry.t} training path")
            row, obj = _target_box(ann.box, oriented)
            labels.append(registry.column(name))
            rows.append(row)
            objs.append(obj)
        width = 5 if oriented else 4
        boxes = torch.tensor(rows, dtype=torch.float64).reshape(-1, width)
        targets.append(Target(labels, boxes, objs))
        labeled.append(i in manifest.labeled_ids)
    return Batch(list(image_ids), pixels, targets, labeled)


def batches(ids: Sequence[int], batch_size: int, rng: np.random.Generator):
    ids = list(ids)
    rng.shuffle(ids)
    for s in range(0, len(ids), batch_size):
        chunk = ids[s : s + batch_size]
        if len(chunk) >= 1:
            yield chunk


def _match_weights(cfg: RunConfig) -> MatchWeights:
    return MatchWeights(cfg.loss.match_cls, cfg.loss.match_l1, cfg.loss.match_giou)


@torch.no_grad()
def previous_class_regions(reference: Detector, x: torch.Tensor, threshold: float) -> list[list[tuple[AnyBox, int]]]:
    """``(box, column)`` for every query ``reference`` assigns a known class with score >= ``threshold``.

    Score is ``p(class) * objectness`` as at inference; columns index the
    reference's classifier, whose known columns keep their position when
    the classifier is extended.
    """
    out = reference(x.to(next(reference.parameters()).dtype))
    prob = out.class_logits.softmax(-1)
    best_p, best_c = prob.max(-1)
    score = best_p * torch.sigmoid(out.objectness_logits)
    keep = (best_c < prob.shape[-1] - 1) & (score >= threshold)
    oriented = reference.config.oriented
    regions = []
    for b in range(x.shape[0]):
        qs = sorted(torch.nonzero(keep[b]).flatten().tolist(), key=lambda q: -float(score[b, q]))
        regions.append([(as_box(out.boxes[b, q].tolist(), oriented), int(best_c[b, q])) for q in qs])
    return regions


def guard_assignment(o, match, regions, gt_boxes: Sequence[AnyBox], iou_threshold: float) -> tuple[list[tuple[int, int]], list[int]]:
    """Map previous-class regions onto unmatched queries of one image.

    Regions overlapping a ground-truth box are skipped. Each remaining
    region (strongest first) claims its best-overlapping free query as a
    ``(query, column)`` target; other queries overlapping it are ignored.
    """
    if not regions:
        return [], []
    oriented = o.boxes.shape[-1] == 5
    boxes = o.boxes.detach()
    free = {q: as_box(boxes[q].tolist(), oriented) for q in match.unmatched_queries}
    retained, ignored = [], set()
    for region, column in regions:
        if any(box_iou(region, g) >= iou_threshold for g in gt_boxes):
            continue
        overlaps = sorted(((box_iou(bq, region), q) for q, bq in free.items()), key=lambda e: (-e[0], e[1]))
        overlaps = [(v, q) for v, q in overlaps if v >= iou_threshold]
        if not overlaps:
            continue
        retained.append((overlaps[0][1], column))
        for _, q in overlaps:
            free.pop(q)
            ignored.add(q)
    ignored -= {q for q, _ in retained}
    return retained, sorted(ignored)


def detection_terms(
    output, batch: Batch, cfg: RunConfig, which: Optional[Sequence[int]] = None,
    guard_regions: Optional[Sequence[Sequence[AnyBox]]] = None,
) -> LossBreakdown:
    """Batch-averaged ``L_c``, ``L_r``, ``L_o`` with pseudo-labels on the selected images.

    ``guard_regions`` (per image of the batch) are previous-class
    detections of the detached model; see :func:`guard_assignment`.
    """
    which = range(len(batch.image_ids)) if which is None else which
    terms = []
    num_pseudo = num_ignored = num_retained = 0
    for b in which:
        o = output.select(b)
        t = batch.targets[b]
        gt_boxes = t.boxes.to(o.boxes.dtype)
        match = hungarian_match(o.class_logits.detach(), o.boxes.detach(), t.labels, gt_boxes, _match_weights(cfg))
        retained, ignore = [], []
        if guard_regions is not None:
            retained, ignore = guard_assignment(o, match, guard_regions[b], t.box_objs, cfg.pseudo.guard_iou)
        pseudo = ()
        if cfg.pseudo.enabled and (batch.labeled[b] or cfg.pseudo.on_unlabeled):
            pseudo = pseudo_label_image(
                o, match, t.box_objs, cfg.pseudo.k, cfg.pseudo.overlap_threshold, cfg.pseudo.scorer,
                cfg.pseudo.aggregation, exclude=ignore + [q for q, _ in retained],
            ).queries
            num_pseudo += len(pseudo)
        num_ignored += len(ignore)
        num_retained += len(retained)
        terms.append(
            detection_loss(
                o.class_logits, o.objectness_logits, o.boxes, t.labels, gt_boxes, match, pseudo,
                cfg.loss.alpha, cfg.loss.background_weight, ignore, retained, cfg.loss.background_target,
            )
        )
    if not terms:
        raise DataError("no images to compute detection losses on")
    n = len(terms)
    L_c = sum(t.L_c for t in terms) / n
    L_r = sum(t.L_r for t in terms) / n
    L_o = sum(t.L_o for t in terms) / n
    zero = L_c * 0
    return LossBreakdown(L_c, L_r, L_o, zero, L_c + L_r + cfg.loss.alpha * L_o, cfg.loss.alpha, extras={"num_pseudo": num_pseudo / n, "num_ignored": num_ignored / n, "num_retained": num_retained / n})


def make_optimizer(params, cfg: RunConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW([p for p in params if p.requires_grad], lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)


def _maybe_drop_lr(optimizer, epoch: int, epochs: int, cfg: RunConfig) -> None:
    if cfg.optim.lr_drop < 1 and epoch == int(cfg.optim.lr_drop * epochs) and epoch > 0:
        for group in optimizer.param_groups:
            group["lr"] = group["lr"] * 0.1


def _apply(loss: LossBreakdown, params, optimizer, cfg: RunConfig):
    optimizer.zero_grad(set_to_none=True)
    loss.total.backward()
    if cfg.optim.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(params, cfg.optim.grad_clip)
    optimizer.step()


def _guard_model(detached: Optional[Detector], current: Detector, cfg: RunConfig) -> Optional[Detector]:
    # only a model from an earlier task knows classes the current task does not label
    if detached is None or not cfg.pseudo.guard_previous or detached.task >= current.task:
        return None
    return detached


def supervised_step(model: Detector, batch: Batch, optimizer, cfg: RunConfig, guard: Optional[Detector] = None) -> LossBreakdown:
    """One detection-loss update; ``guard`` (a frozen previous-task model) supplies guard regions."""
    if model.frozen:
        raise FrozenModelError("supervised_step called on a frozen model")
    model.train()
    dtype = next(model.parameters()).dtype
    x = batch.tensor(dtype)
    regions = previous_class_regions(guard, x, cfg.pseudo.guard_threshold) if guard is not None else None
    out = model(x)
    loss = total_loss(detection_terms(out, batch, cfg, guard_regions=regions), 0.0, cfg.loss.alpha)
    _apply(loss, list(model.parameters()), optimizer, cfg)
    return loss


def augment_batch(batch: Batch, spec: AugmentationSpec, step_seed: int) -> list[np.ndarray]:
    """Augmented copies, one per image id, seeded by (step, image id)."""
    return [augment(p, spec.with_seed(hash((step_seed, i)) & 0x7FFFFFFF)) for i, p in zip(batch.image_ids, batch.pixels)]


def semi_supervised_step(
    current: Detector,
    detached: Detector,
    mapper: MappingNetwork,
    labeled: Batch,
    unlabeled: Optional[Batch],
    optimizer,
    cfg: RunConfig,
    aug_spec: AugmentationSpec,
    step_seed: int = 0,
) -> LossBreakdown:
    """One update of ``current`` and ``mapper``; ``detached`` only supplies targets.

    Detection losses use the labeled images; ``L_cur`` uses every image of
    both batches, paired with its augmented copy.
    """
    if not detached.frozen:
        raise ProtocolError("the detached model must be frozen (use clone_detached)")
    if current.frozen:
        raise FrozenModelError("semi_supervised_step called on a frozen current model")
    current.train()
    mapper.train()
    dtype = next(current.parameters()).dtype

    parts = [labeled] + ([unlabeled] if unlabeled is not None and unlabeled.image_ids else [])
    merged = Batch(
        [i for p in parts for i in p.image_ids],
        [x for p in parts for x in p.pixels],
        [t for p in parts for t in p.targets],
        [f for p in parts for f in p.labeled],
    )
    aug_pixels = augment_batch(merged, aug_spec, step_seed)
    aug_ids = [i for i, _ in zip(merged.image_ids, aug_pixels)]
    assert aug_ids == merged.image_ids, "augmented batch drifted from the original image ids"

    x = merged.tensor(dtype)
    x_a = merged.tensor(dtype, aug_pixels)
    out = current(x)
    out_a = current(x_a)
    with torch.no_grad():
        z_bar_a = detached(x_a).query_embeddings
    guard = _guard_model(detached, current, cfg)
    regions = previous_class_regions(guard, x, cfg.pseudo.guard_threshold) if guard is not None else None

    n_l = len(labeled.image_ids)
    which = list(range(n_l))
    if cfg.pseudo.on_unlabeled:
        which = list(range(len(merged.image_ids)))
    if n_l == 0 and not cfg.pseudo.on_unlabeled:
        det = LossBreakdown(*(out.class_logits.sum() * 0,) * 5, alpha=cfg.loss.alpha)
    else:
        det = detection_terms(out, merged, cfg, which, regions)
    l_cur = ssl_loss(AlignmentBatch(out.query_embeddings, out_a.query_embeddings, z_bar_a), mapper, cfg.loss.lambda_offdiag)
    loss = total_loss(det, l_cur, cfg.loss.alpha, cfg.loss.cur_weight)
    params = list(current.parameters()) + list(mapper.parameters())
    _apply(loss, params, optimizer, cfg)
    return loss


def _log(logger: Optional[StepLogger], task, phase, step, loss: LossBreakdown):
    if logger is not None:
        logger({"task": task, "phase": phase, "step": step, **loss.as_floats()})


def train_supervised(
    model: Detector,
    manifest: DatasetManifest,
    store: ImageStore,
    registry: KnownClassRegistry,
    cfg: RunConfig,
    epochs: int,
    rng: np.random.Generator,
    logger: Optional[StepLogger] = None,
    phase: str = "supervised",
    optimizer=None,
    guard: Optional[Detector] = None,
) -> Detector:
    ids = sorted(manifest.labeled_ids)
    if not ids:
        raise DataError("no labeled images to train on")
    optimizer = optimizer or make_optimizer(model.parameters(), cfg)
    step = 0
    for epoch in range(epochs):
        _maybe_drop_lr(optimizer, epoch, epochs, cfg)
        for chunk in batches(ids, cfg.optim.batch_size, rng):
            batch = make_batch(manifest, chunk, store, registry, model.config.oriented)
            loss = supervised_step(model, batch, optimizer, cfg, guard)
            _log(logger, registry.t, phase, step, loss)
            step += 1
    return model


def finetune_labeled(
    current: Detector,
    manifest: DatasetManifest,
    store: ImageStore,
    registry: KnownClassRegistry,
    cfg: RunConfig,
    epochs: int,
    rng: np.random.Generator,
    logger: Optional[StepLogger] = None,
    detached: Optional[Detector] = None,
) -> Detector:
    """Supervised-only phase on the labeled images of the current task."""
    if not manifest.labeled_ids:
        raise DataError("fine-tuning needs a non-empty labeled set")
    if epochs == 0:
        return current
    guard = _guard_model(detached, current, cfg)
    return train_supervised(current, manifest, store, registry, cfg, epochs, rng, logger, phase="finetune", guard=guard)


def train_alignment(
    current: Detector,
    detached: Detector,
    mapper: MappingNetwork,
    manifest: DatasetManifest,
    store: ImageStore,
    registry: KnownClassRegistry,
    cfg: RunConfig,
    epochs: int,
    rng: np.random.Generator,
    logger: Optional[StepLogger] = None,
) -> Detector:
    aug_spec = AugmentationSpec(enabled=frozenset(cfg.augment.enabled), params=cfg.augment.params, seed=cfg.seed)
    optimizer = make_optimizer(list(current.parameters()) + list(mapper.parameters()), cfg)
    step = 0
    for epoch in range(epochs):
        _maybe_drop_lr(optimizer, epoch, epochs, cfg)
        for chunk in batches(manifest.image_ids, cfg.optim.batch_size, rng):
            lab = [i for i in chunk if i in manifest.labeled_ids]
            unl = [i for i in chunk if i in manifest.unlabeled_ids]
            lb = make_batch(manifest, lab, store, registry, current.config.oriented)
            ub = make_batch(manifest, unl, store, registry, current.config.oriented)
            loss = semi_supervised_step(current, detached, mapper, lb, ub, optimizer, cfg, aug_spec, step_seed=step + 1000 * registry.t + cfg.seed)
            _log(logger, registry.t, "align", step, loss)
            step += 1
    return current


class JsonlLogger:
    """Appends one JSON record per training step."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("a")

    def __call__(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()
