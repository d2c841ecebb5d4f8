"""Open-world detection metrics: per-class AP, Prev/Cur/Both mAP and U-Recall."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .data.manifest import UNKNOWN, DatasetManifest, InstanceAnnotation
from .geometry import AnyBox, box_iou
from .schedule import KnownClassRegistry


@dataclass(frozen=True)
class DetectionRecord:
    image_id: int
    label: int  # category id, or UNKNOWN
    score: float
    box: AnyBox


def _greedy_match(dets, gts, iou_threshold, iou_fn) -> list[bool]:
    """TP flags for ``dets`` (already score-sorted); each GT absorbs at most one detection."""
    by_image: dict[int, list[AnyBox]] = {}
    for g in gts:
        by_image.setdefault(g.image_id, []).append(g.box)
    used = {img: [False] * len(boxes) for img, boxes in by_image.items()}
    flags = []
    for d in dets:
        best, best_iou = -1, iou_threshold
        for j, g in enumerate(by_image.get(d.image_id, ())):
            if used[d.image_id][j]:
                continue
            v = iou_fn(d.box, g)
            if v >= best_iou:
                best, best_iou = j, v
        if best >= 0:
            used[d.image_id][best] = True
        flags.append(best >= 0)
    return flags


def _sorted(dets: Iterable[DetectionRecord]) -> list[DetectionRecord]:
    return sorted(dets, key=lambda d: -d.score)  # stable: ties keep input order


def average_precision(
    dets: Sequence[DetectionRecord],
    gts: Sequence[InstanceAnnotation],
    label: int,
    iou_threshold: float = 0.5,
    iou_fn: Callable[[AnyBox, AnyBox], float] = box_iou,
) -> Optional[float]:
    """All-point interpolated AP for one class; ``None`` when the class has no GT."""
    gts = [g for g in gts if g.label == label]
    if not gts:
        return None
    dets = _sorted(d for d in dets if d.label == label)
    if not dets:
        return 0.0
    tp = np.array(_greedy_match(dets, gts, iou_threshold, iou_fn), dtype=float)
    ctp, cfp = np.cumsum(tp), np.cumsum(1 - tp)
    recall = ctp / len(gts)
    precision = ctp / (ctp + cfp)
    # monotone precision envelope, integrated over recall steps
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def unknown_recall(
    dets: Sequence[DetectionRecord],
    unknown_gts: Sequence[InstanceAnnotation],
    iou_threshold: float = 0.5,
    iou_fn: Callable[[AnyBox, AnyBox], float] = box_iou,
) -> Optional[float]:
    """Fraction of unknown GT instances covered by an UNKNOWN detection; ``None`` without unknown GT."""
    if not unknown_gts:
        return None
    dets = _sorted(d for d in dets if d.label == UNKNOWN)
    flags = _greedy_match(dets, unknown_gts, iou_threshold, iou_fn)
    return sum(flags) / len(unknown_gts)


def _mean(values) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class MetricReport:
    task: int
    per_class_ap: dict[str, Optional[float]]
    mAP_prev: Optional[float]
    mAP_cur: Optional[float]
    mAP_both: Optional[float]
    u_recall: Optional[float] = None
    has_u_recall: bool = True
    iou_threshold: float = 0.5
    top_k: Optional[int] = None
    interpolation: str = "all-point"
    config_fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        if not self.has_u_recall:
            d.pop("u_recall")
        d.pop("has_u_recall")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        d["has_u_recall"] = "u_recall" in d
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def map_report(
    dets: Sequence[DetectionRecord],
    gts: Sequence[InstanceAnnotation],
    registry: KnownClassRegistry,
    categories: Sequence[str],
    iou_threshold: float = 0.5,
    iou_fn: Callable[[AnyBox, AnyBox], float] = box_iou,
    top_k: Optional[int] = None,
    config_fingerprint: str = "",
) -> MetricReport:
    """Metrics at task ``registry.t``; ``gts`` must already be remapped for evaluation.

    UNKNOWN never enters mAP. U-Recall is attached unless this is the final task.
    """
    per_class = {
        name: average_precision(dets, gts, categories.index(name), iou_threshold, iou_fn) for name in registry.known
    }
    report = MetricReport(
        task=registry.t,
        per_class_ap=per_class,
        mAP_prev=_mean(per_class[c] for c in registry.previous),
        mAP_cur=_mean(per_class[c] for c in registry.current),
        mAP_both=_mean(per_class.values()),
        has_u_recall=not registry.is_final,
        iou_threshold=iou_threshold,
        top_k=top_k,
        config_fingerprint=config_fingerprint,
    )
    if not registry.is_final:
        report.u_recall = unknown_recall(dets, [g for g in gts if g.label == UNKNOWN], iou_threshold, iou_fn)
    return report


def export_coco_results(dets: Sequence[DetectionRecord], manifest: DatasetManifest) -> list[dict]:
    """Detections as a COCO-results-style list (pixel ``[x, y, w, h]``; oriented boxes add ``theta``)."""
    sizes = {im.id: (im.width, im.height) for im in manifest.images}
    out = []
    for d in dets:
        W, H = sizes[d.image_id]
        b = d.box
        rec = {
            "image_id": d.image_id,
            "category_id": d.label,
            "category_name": manifest.categories[d.label] if d.label != UNKNOWN else "unknown",
            "bbox": [(b.cx - b.w / 2) * W, (b.cy - b.h / 2) * H, b.w * W, b.h * H],
            "score": d.score,
        }
        if b.theta:
            rec["theta"] = b.theta
        out.append(rec)
    return out
