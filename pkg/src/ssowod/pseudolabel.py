"""Object-query-guided pseudo-labeling of unknown objects.

Encoder maps ``E_i`` (``H_i x W_i x D``) are contracted with the unmatched
query embeddings ``Q`` (``J x D``) into query-modulated maps
``F_i[h, w, j] = sum_d E_i[h, w, d] * Q[j, d]``. Candidate ``j`` is scored by
averaging its own channel ``F_i[:, :, j]`` over the cells inside its
predicted box, then aggregating across scales (mean by default).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import torch

from .errors import DegenerateBoxError, ParameterError, ShapeError
from .geometry import AnyBox, as_box, box_iou, box_masks

Aggregation = Literal["mean", "max"]
Scorer = Literal["query", "encoder", "backbone"]


@dataclass(frozen=True)
class PseudoLabel:
    query: int
    box: AnyBox
    score: float


@dataclass(frozen=True)
class PseudoLabelSet:
    entries: tuple[PseudoLabel, ...]
    k: int

    @property
    def queries(self) -> list[int]:
        return [e.query for e in self.entries]


def modulate(encoder_features: Sequence[torch.Tensor], queries: torch.Tensor) -> list[torch.Tensor]:
    """Query-modulated maps, one ``(H_i, W_i, J)`` tensor per scale."""
    queries = torch.as_tensor(queries)
    maps = []
    for E in encoder_features:
        E = torch.as_tensor(E)
        if E.shape[-1] != queries.shape[-1]:
            raise ShapeError(f"feature dim {E.shape[-1]} != query dim {queries.shape[-1]}")
        maps.append(torch.einsum("hwd,jd->hwj", E, queries.to(E.dtype)))
    return maps


def _pool_per_scale(maps, boxes, strict):
    boxes = torch.as_tensor(boxes)
    J = boxes.shape[0]
    per_scale = []
    for F_i in maps:
        if F_i.shape[-1] != J:
            raise ShapeError(f"{F_i.shape[-1]} map channels for {J} boxes")
        H, W = F_i.shape[:2]
        masks = box_masks(H, W, boxes.to(F_i.dtype))
        counts = masks.sum((1, 2))
        if strict and bool((counts == 0).any()):
            j = int((counts == 0).nonzero()[0])
            raise DegenerateBoxError(f"empty pooling region: box {boxes[j].tolist()} on a {H}x{W} map")
        pooled = torch.einsum("jhw,hwj->j", masks, F_i) / counts
        per_scale.append(pooled)  # NaN where counts == 0
    return torch.stack(per_scale)


def aggregate(per_scale: torch.Tensor, aggregation: Aggregation) -> torch.Tensor:
    if aggregation == "mean":
        return per_scale.mean(0)
    if aggregation == "max":
        return per_scale.max(0).values
    raise ParameterError(f"unknown aggregation {aggregation!r}")


def objectness_scores(
    maps: Sequence[torch.Tensor], boxes: torch.Tensor, aggregation: Aggregation = "mean", strict: bool = True
) -> torch.Tensor:
    """Per-candidate objectness ``s_j`` from query-modulated maps.

    With ``strict=False`` candidates whose box misses every cell center at
    some scale get NaN instead of raising.
    """
    return aggregate(_pool_per_scale(maps, boxes, strict), aggregation)


def factorized_scores(encoder_features, queries, boxes, aggregation: Aggregation = "mean") -> torch.Tensor:
    """Same scores computed as ``dot(Q_j, box-pooled E)``: pooling first, then the product."""
    queries = torch.as_tensor(queries)
    per_scale = []
    for E in encoder_features:
        H, W, _ = E.shape
        masks = box_masks(H, W, torch.as_tensor(boxes).to(E.dtype))
        pooled = torch.einsum("jhw,hwd->jd", masks, E) / masks.sum((1, 2))[:, None]
        per_scale.append((pooled * queries.to(E.dtype)).sum(-1))
    return aggregate(torch.stack(per_scale), aggregation)


def feature_average_scores(feature_maps: Sequence[torch.Tensor], boxes, aggregation: Aggregation = "mean", channels_last=True, strict=True):
    """Baseline scorer: channel-averaged features pooled at each box.

    ``feature_maps`` are ``(H, W, C)`` (or ``(C, H, W)`` with
    ``channels_last=False``). One map reproduces the single-layer
    backbone-activation heuristic; passing all encoder scales gives the
    encoder-feature variant.
    """
    J = torch.as_tensor(boxes).shape[0]
    maps = []
    for f in feature_maps:
        avg = f.mean(-1) if channels_last else f.mean(0)
        maps.append(avg[..., None].expand(-1, -1, J))
    return objectness_scores(maps, boxes, aggregation, strict)


def select_pseudo_labels(
    candidates: Sequence[tuple[int, AnyBox, float]],
    gt_boxes: Sequence[AnyBox],
    k: int = 10,
    overlap_threshold: float = 0.0,
) -> PseudoLabelSet:
    """Top-``k`` candidates whose IoU with every ground-truth box is ``<= overlap_threshold``.

    Ties in score go to the lower query index.
    """
    if k < 1:
        raise ParameterError("k must be >= 1")
    survivors = [
        PseudoLabel(int(q), box, float(score))
        for q, box, score in candidates
        if score == score and all(box_iou(box, g) <= overlap_threshold for g in gt_boxes)
    ]
    survivors.sort(key=lambda e: (-e.score, e.query))
    return PseudoLabelSet(tuple(survivors[:k]), k)


def score_candidates(output, queries: Sequence[int], scorer: Scorer = "query", aggregation: Aggregation = "mean"):
    """Scores for the given query indices of one image's (unbatched) forward output.

    Runs without gradient: scores only pick targets.
    """
    idx = list(queries)
    with torch.no_grad():
        boxes = output.boxes[idx, :4].detach()
        if scorer == "query":
            maps = modulate([e.detach() for e in output.encoder_features], output.query_embeddings[idx].detach())
            return objectness_scores(maps, boxes, aggregation, strict=False)
        if scorer == "encoder":
            return feature_average_scores([e.detach() for e in output.encoder_features], boxes, aggregation, strict=False)
        if scorer == "backbone":
            # single middle-resolution backbone layer, as in the feature-averaging baseline
            feats = output.backbone_features
            f = feats[min(1, len(feats) - 1)].detach()
            return feature_average_scores([f], boxes, aggregation, channels_last=False, strict=False)
    raise ParameterError(f"unknown scorer {scorer!r}")


def pseudo_label_image(
    output, match, gt_boxes: Sequence[AnyBox], k=10, overlap_threshold=0.0, scorer: Scorer = "query",
    aggregation: Aggregation = "mean", exclude: Sequence[int] = (),
) -> PseudoLabelSet:
    """Pseudo-labels for one image: score the unmatched queries, filter against GT, keep top-k.

    Queries in ``exclude`` are never candidates.
    """
    skip = set(exclude)
    queries = [q for q in match.unmatched_queries if q not in skip]
    if not queries:
        return PseudoLabelSet((), k)
    scores = score_candidates(output, queries, scorer, aggregation)
    oriented = output.boxes.shape[-1] == 5
    boxes = output.boxes.detach()
    cands = [(q, as_box(boxes[q].tolist(), oriented), float(s)) for q, s in zip(queries, scores)]
    return select_pseudo_labels(cands, gt_boxes, k, overlap_threshold)
