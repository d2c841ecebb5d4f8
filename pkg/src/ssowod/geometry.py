"""Box primitives, IoU (axis-aligned and rotated) and spatial box pooling.

All boxes are stored in normalized image coordinates: ``cx, cy`` in [0, 1],
``w, h`` in (0, 1]. ``theta`` is in radians, canonical range [-pi/2, pi/2),
measured from the +x axis towards +y.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch

from .errors import DegenerateBoxError, ParameterError

HALF_PI = math.pi / 2


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ParameterError(f"non-finite box {vals}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ParameterError(f"box center outside unit square: {vals}")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ParameterError(f"box size outside (0, 1]: {vals}")

    @property
    def theta(self) -> float:
        return 0.0

    def corners_xyxy(self) -> tuple[float, float, float, float]:
        """Corner form ``(x0, y0, x1, y1)`` clipped to the unit square."""
        return (
            max(0.0, self.cx - self.w / 2),
            max(0.0, self.cy - self.h / 2),
            min(1.0, self.cx + self.w / 2),
            min(1.0, self.cy + self.h / 2),
        )

    def as_tuple(self) -> tuple[float, ...]:
        return (self.cx, self.cy, self.w, self.h)


@dataclass(frozen=True)
class OrientedBox(Box):
    theta: float = 0.0  # type: ignore[assignment]

    def __post_init__(self):
        super().__post_init__()
        if not (-HALF_PI <= self.theta < HALF_PI):
            raise ParameterError(f"theta {self.theta} outside [-pi/2, pi/2)")

    def as_tuple(self) -> tuple[float, ...]:
        return (self.cx, self.cy, self.w, self.h, self.theta)

    def envelope(self) -> Box:
        """Tightest axis-aligned box around the rotated rectangle, clipped."""
        pts = box_to_corners(self)
        x0, y0 = np.clip(pts.min(axis=0), 0.0, 1.0)
        x1, y1 = np.clip(pts.max(axis=0), 0.0, 1.0)
        w, h = max(x1 - x0, 1e-9), max(y1 - y0, 1e-9)
        return Box(float((x0 + x1) / 2), float((y0 + y1) / 2), float(w), float(h))


AnyBox = Union[Box, OrientedBox]


def box_from_xyxy(x0: float, y0: float, x1: float, y1: float) -> Box:
    return Box((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def wrap_angle(theta: float) -> float:
    """Map an angle onto the canonical half-open range [-pi/2, pi/2)."""
    t = (theta + HALF_PI) % math.pi - HALF_PI
    # float modulo can land exactly on +pi/2
    return -HALF_PI if t >= HALF_PI else t


def iou(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a.corners_xyxy()
    bx0, by0, bx1, by1 = b.corners_xyxy()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return float(min(1.0, inter / union))


def box_to_corners(b: AnyBox) -> np.ndarray:
    """Four corners ``(4, 2)`` in counter-clockwise order (positive shoelace area)."""
    c, s = math.cos(b.theta), math.sin(b.theta)
    local = np.array([[-b.w, -b.h], [b.w, -b.h], [b.w, b.h], [-b.w, b.h]]) / 2
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([b.cx, b.cy])


def corners_to_box(corners: np.ndarray) -> OrientedBox:
    """Inverse of :func:`box_to_corners` for corners of an exact rectangle."""
    p = np.asarray(corners, dtype=float)
    center = p.mean(axis=0)
    e0 = p[1] - p[0]
    e1 = p[2] - p[1]
    theta = math.atan2(e0[1], e0[0])
    w, h = float(np.hypot(*e0)), float(np.hypot(*e1))
    if not -HALF_PI <= theta < HALF_PI:
        theta = wrap_angle(theta)
    return OrientedBox(float(center[0]), float(center[1]), w, h, theta)


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW ``clipper``."""
    out = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        a, b = clipper[i], clipper[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_intersect(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_intersect(prev, cur, sp, sc))
            prev, sp = cur, sc
    return np.array(out, dtype=float).reshape(-1, 2)


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def oriented_iou(a: AnyBox, b: AnyBox) -> float:
    if a.theta == 0.0 and b.theta == 0.0:
        return iou(a, b)
    pa, pb = box_to_corners(a), box_to_corners(b)
    inter = abs(polygon_area(clip_polygon(pa, pb)))
    union = a.w * a.h + b.w * b.h - inter
    if union <= 0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))


def box_iou(a: AnyBox, b: AnyBox) -> float:
    """IoU that dispatches on box type."""
    if isinstance(a, OrientedBox) or isinstance(b, OrientedBox):
        return oriented_iou(a, b)
    return iou(a, b)


def min_area_rect(points: np.ndarray) -> OrientedBox:
    """Minimum-area enclosing rectangle of a point set (rotating calipers).

    Among equal-area candidates the one with the smallest ``|theta|`` wins,
    so an axis-aligned quad yields ``theta == 0``.
    """
    from scipy.spatial import ConvexHull

    pts = np.asarray(points, dtype=float)
    try:
        hull = pts[ConvexHull(pts).vertices]
    except Exception as exc:  # collinear / duplicate points
        raise ParameterError(f"degenerate quadrilateral {pts.tolist()}") from exc
    best = None
    for i in range(len(hull)):
        e = hull[(i + 1) % len(hull)] - hull[i]
        theta = wrap_angle(math.atan2(e[1], e[0]))
        c, s = math.cos(theta), math.sin(theta)
        # coordinates in the frame rotated by theta
        u = hull @ np.array([c, s])
        v = hull @ np.array([-s, c])
        w, h = u.max() - u.min(), v.max() - v.min()
        area = w * h
        key = (round(area, 12), abs(theta))
        if best is None or key < best[0]:
            uc, vc = (u.max() + u.min()) / 2, (v.max() + v.min()) / 2
            cx, cy = uc * c - vc * s, uc * s + vc * c
            best = (key, (cx, cy, w, h, theta))
    cx, cy, w, h, theta = best[1]
    return OrientedBox(float(cx), float(cy), float(w), float(h), float(theta))


def cell_mask(height: int, width: int, box: AnyBox) -> np.ndarray:
    """Boolean ``(height, width)`` mask of cells whose centers lie in ``box``.

    Intervals are half-open: ``x0 <= x < x1``.
    """
    x0, y0 = box.cx - box.w / 2, box.cy - box.h / 2
    x1, y1 = box.cx + box.w / 2, box.cy + box.h / 2
    xs = (np.arange(width) + 0.5) / width
    ys = (np.arange(height) + 0.5) / height
    return ((ys >= y0) & (ys < y1))[:, None] & ((xs >= x0) & (xs < x1))[None, :]


def pool_region(values: np.ndarray, box: AnyBox) -> float:
    """Mean of a single-channel ``(H, W)`` map over the cells inside ``box``."""
    values = np.asarray(values)
    if values.ndim == 3 and values.shape[-1] == 1:
        values = values[..., 0]
    if values.ndim != 2:
        raise ParameterError(f"expected a single-channel map, got shape {values.shape}")
    mask = cell_mask(*values.shape, box)
    if not mask.any():
        raise DegenerateBoxError(f"empty pooling region for {box} on {values.shape} map")
    return float(values[mask].mean())


# ---------------------------------------------------------------------------
# batched torch helpers used by matching and the losses


def cxcywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def pairwise_iou_giou(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Pairwise IoU and generalized IoU between ``(N, 4)`` and ``(M, 4)`` cxcywh boxes."""
    a, b = cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    iou_ = inter / union
    lt_c = torch.min(a[:, None, :2], b[None, :, :2])
    rb_c = torch.max(a[:, None, 2:], b[None, :, 2:])
    wh_c = (rb_c - lt_c).clamp(min=0)
    hull = wh_c[..., 0] * wh_c[..., 1]
    return iou_, iou_ - (hull - union) / hull


def elementwise_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Generalized IoU of matched rows of two ``(N, 4)`` cxcywh tensors."""
    a, b = cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.max(a[:, :2], b[:, :2])
    rb = torch.min(a[:, 2:], b[:, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[:, 0] * wh[:, 1]
    union = area_a + area_b - inter
    lt_c = torch.min(a[:, :2], b[:, :2])
    rb_c = torch.max(a[:, 2:], b[:, 2:])
    wh_c = rb_c - lt_c
    hull = wh_c[:, 0] * wh_c[:, 1]
    return inter / union - (hull - union) / hull


def box_masks(height: int, width: int, boxes: torch.Tensor) -> torch.Tensor:
    """``(N, H, W)`` float membership masks for ``(N, >=4)`` cxcywh boxes."""
    xs = (torch.arange(width, dtype=boxes.dtype, device=boxes.device) + 0.5) / width
    ys = (torch.arange(height, dtype=boxes.dtype, device=boxes.device) + 0.5) / height
    x0 = (boxes[:, 0] - boxes[:, 2] / 2)[:, None]
    x1 = (boxes[:, 0] + boxes[:, 2] / 2)[:, None]
    y0 = (boxes[:, 1] - boxes[:, 3] / 2)[:, None]
    y1 = (boxes[:, 1] + boxes[:, 3] / 2)[:, None]
    in_x = (xs[None, :] >= x0) & (xs[None, :] < x1)
    in_y = (ys[None, :] >= y0) & (ys[None, :] < y1)
    return (in_y[:, :, None] & in_x[:, None, :]).to(boxes.dtype)


def as_box(values: Sequence[float], oriented: bool = False) -> AnyBox:
    """Build a (clamped) box from raw prediction numbers."""
    cx, cy = (min(max(float(v), 0.0), 1.0) for v in values[:2])
    w, h = (min(max(float(v), 1e-6), 1.0) for v in values[2:4])
    if oriented:
        return OrientedBox(cx, cy, w, h, wrap_angle(float(values[4])))
    return Box(cx, cy, w, h)
