"""Query/ground-truth bipartite matching and the supervised detection losses."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .errors import CapacityError, NumericError, ShapeError
from .geometry import elementwise_giou, pairwise_iou_giou


@dataclass(frozen=True)
class MatchWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int], ...]  # (query index, gt index), sorted by query
    num_queries: int
    cost: float = 0.0

    @property
    def matched_queries(self) -> list[int]:
        return [q for q, _ in self.pairs]

    @property
    def unmatched_queries(self) -> list[int]:
        taken = set(self.matched_queries)
        return [q for q in range(self.num_queries) if q not in taken]


def linear_assignment(cost: np.ndarray) -> tuple[list[tuple[int, int]], float]:
    """Minimum-cost one-to-one assignment of the columns of ``cost`` to rows."""
    cost = np.asarray(cost, dtype=float)
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    return pairs, float(cost[rows, cols].sum())


def angle_difference(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``a - b`` wrapped to [-pi/2, pi/2) (rectangles are pi-periodic)."""
    d = a - b
    return d - math.pi * torch.floor((d + math.pi / 2) / math.pi)


def matching_cost(class_logits, boxes, gt_labels, gt_boxes, weights: MatchWeights = MatchWeights()) -> torch.Tensor:
    """``(M, G)`` cost: ``-p(class)``, L1 box distance and ``1 - gIoU``."""
    prob = class_logits.softmax(-1)[:, gt_labels]
    l1 = torch.cdist(boxes[:, :4], gt_boxes[:, :4], p=1)
    if boxes.shape[-1] == 5:
        l1 = l1 + angle_difference(boxes[:, 4:5], gt_boxes[None, :, 4]).abs()
    _, giou = pairwise_iou_giou(boxes[:, :4], gt_boxes[:, :4])
    return weights.cls * (-prob) + weights.l1 * l1 + weights.giou * (1 - giou)


@torch.no_grad()
def hungarian_match(class_logits, boxes, gt_labels, gt_boxes, weights: MatchWeights = MatchWeights()) -> MatchResult:
    M = class_logits.shape[0]
    G = len(gt_labels)
    if G > M:
        raise CapacityError(f"{G} ground-truth boxes but only {M} queries")
    if G == 0:
        return MatchResult((), M, 0.0)
    cost = matching_cost(class_logits, boxes, torch.as_tensor(gt_labels), gt_boxes, weights)
    pairs, total = linear_assignment(cost.cpu().double().numpy())
    return MatchResult(tuple(pairs), M, total)


@dataclass
class LossBreakdown:
    L_c: torch.Tensor
    L_r: torch.Tensor
    L_o: torch.Tensor
    L_cur: torch.Tensor
    total: torch.Tensor
    alpha: float = 1.0
    cur_weight: float = 1.0
    extras: dict = field(default_factory=dict)

    def as_floats(self) -> dict[str, float]:
        out = {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in ("L_c", "L_r", "L_o", "L_cur", "total")}
        out.update({k: float(v) for k, v in self.extras.items()})
        return out


def total_loss(det: LossBreakdown, ssl=0.0, alpha: float | None = None, cur_weight: float = 1.0) -> LossBreakdown:
    """Compose ``L_c + L_r + alpha * L_o + cur_weight * L_cur``."""
    alpha = det.alpha if alpha is None else alpha
    ref = det.L_c
    ssl = torch.as_tensor(ssl, dtype=ref.dtype) if not isinstance(ssl, torch.Tensor) else ssl
    for name, value in (("L_c", det.L_c), ("L_r", det.L_r), ("L_o", det.L_o), ("L_cur", ssl)):
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise NumericError(f"loss term {name} is not finite ({float(value)})")
    total = det.L_c + det.L_r + alpha * det.L_o + cur_weight * ssl
    return LossBreakdown(det.L_c, det.L_r, det.L_o, ssl, total, alpha, cur_weight, dict(det.extras))


def detection_loss(
    class_logits: torch.Tensor,
    objectness_logits: torch.Tensor,
    boxes: torch.Tensor,
    gt_labels: Sequence[int],
    gt_boxes: torch.Tensor,
    match: MatchResult,
    pseudo_queries: Sequence[int] = (),
    alpha: float = 1.0,
    background_weight: float = 0.1,
    ignore_queries: Sequence[int] = (),
    retained: Sequence[tuple[int, int]] = (),
    background: str = "uniform",
) -> LossBreakdown:
    """Supervised losses for one image (``L_cur`` is zero here).

    * ``L_c``: cross-entropy over the ``K + 1`` columns. Matched queries
      target their class, pseudo-labeled queries target UNKNOWN (the last
      column). Every other query is background, weighted by
      ``background_weight``: with ``background="uniform"`` its target is
      the uniform distribution over all columns, with ``"not_unknown"`` the
      term is ``-log(1 - p_unknown)``. Weighted mean over queries.
    * ``L_r``: mean over matched queries of ``L1 + (1 - gIoU)`` (+ smooth-L1
      on the wrapped angle for oriented boxes).
    * ``L_o``: binary cross-entropy, foreground = matched + pseudo-labeled.

    ``retained`` pairs ``(query, column)`` add classification targets for
    objects of earlier tasks (no box term); they count as foreground in
    ``L_o``. ``ignore_queries`` drop out of the background part of ``L_c``
    and out of ``L_o``.
    """
    M, C = class_logits.shape
    if objectness_logits.shape != (M,) or boxes.shape[0] != M:
        raise ShapeError("class/objectness/box outputs disagree on the number of queries")
    if len(gt_labels) != gt_boxes.shape[0]:
        raise ShapeError("gt_labels and gt_boxes lengths differ")
    unknown = C - 1
    zero = class_logits.sum() * 0

    matched_q = [q for q, _ in match.pairs]
    matched_g = [g for _, g in match.pairs]
    taken = set(matched_q)
    kept = [(q, c) for q, c in retained if q not in taken]
    taken |= {q for q, _ in kept}
    pseudo = [q for q in pseudo_queries if q not in taken]
    fg_q = matched_q + [q for q, _ in kept] + pseudo
    fg_targets = [int(gt_labels[g]) for g in matched_g] + [int(c) for _, c in kept] + [unknown] * len(pseudo)

    logp = F.log_softmax(class_logits, dim=-1)
    bg_mask = torch.ones(M, dtype=torch.bool)
    bg_mask[fg_q] = False
    ignored = [q for q in ignore_queries if q not in set(fg_q)]
    bg_mask[ignored] = False
    ce_fg = -logp[fg_q, fg_targets].sum() if fg_q else zero
    if background == "uniform":
        # soft target 1/C on every column: no class, UNKNOWN included, wins
        ce_bg = -(logp[bg_mask].mean(-1)).sum()
    elif background == "not_unknown":
        # log(1 - p_unknown) = logsumexp over the known columns - logsumexp over all
        log_not_unknown = torch.logsumexp(class_logits[:, :unknown], -1) - torch.logsumexp(class_logits, -1)
        ce_bg = -(log_not_unknown[bg_mask]).sum()
    else:
        raise ValueError(f"unknown background target {background!r}")
    n_bg = int(bg_mask.sum())
    L_c = (ce_fg + background_weight * ce_bg) / max(len(fg_q) + background_weight * n_bg, 1e-12)

    if matched_q:
        pb = boxes[matched_q]
        gb = gt_boxes[matched_g].to(pb.dtype)
        l1 = (pb[:, :4] - gb[:, :4]).abs().sum(-1)
        giou = elementwise_giou(pb[:, :4], gb[:, :4])
        per = l1 + (1 - giou)
        if boxes.shape[-1] == 5:
            per = per + F.smooth_l1_loss(angle_difference(pb[:, 4], gb[:, 4]), torch.zeros_like(pb[:, 4]), reduction="none")
        L_r = per.mean()
    else:
        L_r = zero

    obj_target = torch.zeros(M, dtype=objectness_logits.dtype)
    obj_target[fg_q] = 1.0
    obj_weight = torch.ones(M, dtype=objectness_logits.dtype)
    obj_weight[ignored] = 0.0
    L_o = (F.binary_cross_entropy_with_logits(objectness_logits, obj_target, reduction="none") * obj_weight).sum() / obj_weight.sum().clamp_min(1.0)

    total = L_c + L_r + alpha * L_o
    return LossBreakdown(L_c, L_r, L_o, zero, total, alpha, extras={"num_pseudo": float(len(pseudo)), "num_ignored": float(len(ignored))})
