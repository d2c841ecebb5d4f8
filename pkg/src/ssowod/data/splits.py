"""Open-world task splits and instance-proportion partial labeling."""
from __future__ import annotations

import math
import random
from collections import Counter

from ..errors import LeakageError, ParameterError, ScheduleCoverageError
from ..schedule import TaskSchedule
from .manifest import DatasetManifest


def partial_label_split(manifest: DatasetManifest, fraction: float, seed: int = 0) -> DatasetManifest:
    """Mark a subset of images as labeled so every class reaches ``fraction`` of its instances.

    Images are taken whole. The class with the largest remaining deficit is
    served first, by the image that adds the least overshoot to the other
    classes; a pruning pass then drops images that are no longer needed.
    Achieved per-class proportions go to ``metadata["achieved_proportions"]``.
    """
    if not 0.0 < fraction <= 1.0:
        raise ParameterError(f"fraction {fraction} outside (0, 1]")
    order = manifest.image_ids
    random.Random(seed).shuffle(order)
    rank = {img: r for r, img in enumerate(order)}
    per_image = {i: Counter(a.label for a in manifest.instances(i)) for i in order}
    totals = Counter()
    for c in per_image.values():
        totals.update(c)

    if fraction == 1.0:
        labeled = set(order)
    else:
        target = {c: math.ceil(fraction * n - 1e-9) for c, n in totals.items()}
        have: Counter = Counter()
        labeled = set()

        def overshoot(img):
            return sum(
                max(0, have[c] + n - target[c]) - max(0, have[c] - target[c]) for c, n in per_image[img].items()
            )

        while True:
            deficits = {c: target[c] - have[c] for c in target if have[c] < target[c]}
            if not deficits:
                break
            cls = max(deficits, key=lambda c: (deficits[c], -c))
            candidates = [i for i in order if i not in labeled and per_image[i][cls] > 0]
            best = min(
                candidates,
                key=lambda i: (overshoot(i), -min(per_image[i][cls], deficits[cls]), rank[i]),
            )
            labeled.add(best)
            have.update(per_image[best])

        # drop images whose removal keeps every class at or above target
        for img in sorted(labeled, key=lambda i: (-sum(per_image[i].values()), rank[i])):
            if all(have[c] - n >= target[c] for c, n in per_image[img].items()):
                labeled.discard(img)
                have.subtract(per_image[img])

    labeled_counts = Counter()
    for i in labeled:
        labeled_counts.update(per_image[i])
    achieved = {
        manifest.categories[c] if c >= 0 else "unknown": labeled_counts[c] / n for c, n in sorted(totals.items())
    }
    meta = dict(manifest.metadata)
    meta.update(
        fraction=fraction,
        split_seed=seed,
        achieved_proportions=achieved,
        labeled_instances=sum(labeled_counts.values()),
        total_instances=sum(totals.values()),
    )
    ids = set(order)
    return manifest.evolve(labeled_ids=frozenset(labeled), unlabeled_ids=frozenset(ids - labeled), metadata=meta)


def check_schedule_coverage(manifest: DatasetManifest, schedule: TaskSchedule) -> None:
    covered = set(schedule.all_classes())
    present = {manifest.categories[a.label] for a in manifest.all_instances() if a.label >= 0}
    missing = sorted(present - covered)
    if missing:
        raise ScheduleCoverageError(f"classes not assigned to any task: {', '.join(missing)}")


def generate_task_splits(manifest: DatasetManifest, schedule: TaskSchedule, seed: int = 0) -> list[DatasetManifest]:
    """Per-task training manifests.

    Task ``t`` keeps the images holding at least one instance of its class
    group, with only that group's labels; every other instance (previous or
    future classes) stays in the pixels but carries no label. Each task's
    ``fraction`` is applied with :func:`partial_label_split`.
    """
    check_schedule_coverage(manifest, schedule)
    out = []
    for t, task in enumerate(schedule.tasks, start=1):
        group = {manifest.class_id(c) for c in task.classes if c in manifest.categories}
        annotations = {}
        for img in manifest.image_ids:
            kept = tuple(a for a in manifest.instances(img) if a.label in group)
            if kept:
                annotations[img] = kept
        images = tuple(im for im in manifest.images if im.id in annotations)
        meta = dict(manifest.metadata)
        meta.update(task=t, classes=list(task.classes))
        task_manifest = DatasetManifest(
            categories=manifest.categories,
            images=images,
            annotations=annotations,
            labeled_ids=frozenset(annotations),
            metadata=meta,
        )
        task_manifest = partial_label_split(task_manifest, task.fraction, seed=seed + t)
        assert_no_leakage(task_manifest, schedule, t)
        out.append(task_manifest)
    return out


def assert_no_leakage(manifest: DatasetManifest, schedule: TaskSchedule, t: int, allow_previous: bool = False):
    """Raise :class:`LeakageError` if a training-visible label is outside task ``t``'s group."""
    registry = schedule.registry(t)
    allowed = set(registry.current) | (set(registry.previous) if allow_previous else set())
    for img in manifest.image_ids:
        for a in manifest.training_annotations(img):
            name = manifest.categories[a.label] if a.label >= 0 else "unknown"
            if name not in allowed:
                raise LeakageError(f"image {img}: label {name!r} visible while training task {t}")
