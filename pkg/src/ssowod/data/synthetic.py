"""Deterministic synthetic shapes scenes with exact box and angle labels.

Every image is fully determined by ``(SyntheticConfig, image seed)``: the
scene (classes, positions, sizes, rotations) and the pixels are regenerated
from the seed, so a persisted manifest only needs to carry the seeds and the
config (stored under ``metadata["synthetic"]``).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from PIL import Image, ImageDraw

from ..geometry import Box, OrientedBox, iou
from .manifest import DatasetManifest, ImageRecord, InstanceAnnotation, fully_labeled


def _regular(n, phase=0.0, radius=1.0):
    a = phase + 2 * math.pi * np.arange(n) / n
    return np.stack([radius * np.cos(a), radius * np.sin(a)], axis=1)


def _star():
    outer = _regular(5, -math.pi / 2)
    inner = _regular(5, -math.pi / 2 + math.pi / 5, 0.45)
    return np.stack([outer, inner], axis=1).reshape(-1, 2)


def _fit(poly):
    """Stretch a polygon so its extent is exactly [-1, 1] on both axes."""
    lo, hi = poly.min(axis=0), poly.max(axis=0)
    return (poly - (lo + hi) / 2) / ((hi - lo) / 2)


_CROSS = np.array(
    [[-1, -0.3], [-0.3, -0.3], [-0.3, -1], [0.3, -1], [0.3, -0.3], [1, -0.3],
     [1, 0.3], [0.3, 0.3], [0.3, 1], [-0.3, 1], [-0.3, 0.3], [-1, 0.3]], dtype=float,
)

# (name, unit polygon in [-1, 1]^2, rgb colour)
SHAPES = [
    ("square", np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float), (0.95, 0.25, 0.2)),
    ("circle", _regular(48), (0.2, 0.85, 0.3)),
    ("triangle", np.array([[-1, 1], [1, 1], [0, -1]], dtype=float), (0.25, 0.45, 1.0)),
    ("cross", _CROSS, (0.95, 0.9, 0.2)),
    ("diamond", np.array([[0, -1], [1, 0], [0, 1], [-1, 0]], dtype=float), (0.9, 0.3, 0.9)),
    ("hexagon", _fit(_regular(6)), (0.2, 0.9, 0.95)),
    ("star", _fit(_star()), (1.0, 0.6, 0.1)),
    ("bar", np.array([[-1, -0.35], [1, -0.35], [1, 0.35], [-1, 0.35]], dtype=float), (0.95, 0.95, 0.95)),
]
CLASS_NAMES = [s[0] for s in SHAPES]


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int = 4
    num_images: int = 200
    min_instances: int = 1
    max_instances: int = 4
    image_size: int = 64
    min_size: float = 0.15
    max_size: float = 0.35
    rotate: bool = True
    oriented: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must be in 2..{len(SHAPES)}")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ValueError("need 1 <= min_instances <= max_instances")


@dataclass(frozen=True)
class Shape:
    label: int
    cx: float
    cy: float
    w: float
    h: float
    theta: float

    def polygon(self) -> np.ndarray:
        """Vertices in normalized image coordinates."""
        unit = SHAPES[self.label][1]
        c, s = math.cos(self.theta), math.sin(self.theta)
        local = unit * np.array([self.w / 2, self.h / 2])
        return local @ np.array([[c, s], [-s, c]]) + np.array([self.cx, self.cy])

    def aabb(self) -> Box:
        p = self.polygon()
        x0, y0 = p.min(axis=0)
        x1, y1 = p.max(axis=0)
        return Box((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def oriented(self) -> OrientedBox:
        return OrientedBox(self.cx, self.cy, self.w, self.h, self.theta)


BALANCE_CANDIDATES = 4


class SyntheticShapes:
    """Scene generator + renderer for one :class:`SyntheticConfig`."""

    def __init__(self, config: SyntheticConfig):
        self.config = config

    @property
    def categories(self) -> list[str]:
        return CLASS_NAMES[: self.config.num_classes]

    def scene(self, seed: int) -> list[Shape]:
        cfg = self.config
        rng = np.random.default_rng(seed)
        n = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
        # classes drawn without replacement inside a scene keep global frequencies near uniform
        labels = np.concatenate([rng.permutation(cfg.num_classes) for _ in range(-(-n // cfg.num_classes))])[:n]
        shapes: list[Shape] = []
        for label in labels.tolist():
            for _attempt in range(100):
                w, h = rng.uniform(cfg.min_size, cfg.max_size, size=2)
                theta = float(rng.uniform(-math.pi / 2, math.pi / 2)) if cfg.rotate else 0.0
                probe = Shape(label, 0.5, 0.5, float(w), float(h), theta).aabb()
                mx, my = probe.w / 2 + 0.01, probe.h / 2 + 0.01
                cx, cy = rng.uniform(mx, 1 - mx), rng.uniform(my, 1 - my)
                cand = Shape(label, float(cx), float(cy), float(w), float(h), theta)
                if all(iou(cand.aabb(), s.aabb()) < 0.05 for s in shapes):
                    shapes.append(cand)
                    break
        return shapes

    def render(self, seed: int) -> np.ndarray:
        """``(S, S, 3)`` float32 image in [0, 1]."""
        size = self.config.image_size
        rng = np.random.default_rng(seed + 7919)
        base = rng.uniform(0.05, 0.25)
        canvas = Image.new("RGB", (size, size), (0, 0, 0))
        draw = ImageDraw.Draw(canvas)
        for shape in self.scene(seed):
            colour = np.clip(np.array(SHAPES[shape.label][2]) * rng.uniform(0.85, 1.0), 0, 1)
            pts = shape.polygon() * size
            draw.polygon([tuple(p) for p in pts], fill=tuple(int(255 * v) for v in colour))
        img = np.asarray(canvas, dtype=np.float32) / 255.0
        mask = img.max(axis=-1, keepdims=True) > 0
        noise = rng.normal(0.0, 0.03, size=img.shape).astype(np.float32)
        return np.clip(np.where(mask, img, base) + noise, 0.0, 1.0).astype(np.float32)

    def annotations(self, image_id: int, seed: int) -> tuple[InstanceAnnotation, ...]:
        out = []
        for s in self.scene(seed):
            box = s.oriented() if self.config.oriented else s.aabb()
            out.append(InstanceAnnotation(image_id, s.label, box))
        return tuple(out)

    def manifest(self, first_id: int = 0) -> DatasetManifest:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        counts = np.zeros(cfg.num_classes, dtype=int)
        images, anns = [], {}
        for k in range(cfg.num_images):
            image_id = first_id + k
            # of a few candidate scenes, keep the one that leaves class counts most even
            # (same instance count as the first draw, so scene sizes stay unbiased)
            best, n = None, None
            for seed in rng.integers(0, 2**31 - 1, size=4 * BALANCE_CANDIDATES).tolist():
                a = self.annotations(image_id, seed)
                if n is None:
                    n, tried = len(a), 0
                if len(a) != n:
                    continue
                tried += 1
                c = counts + np.bincount([x.label for x in a], minlength=cfg.num_classes)
                key = int(c.max() - c.min())
                if best is None or key < best[0]:
                    best = (key, seed, a, c)
                if tried == BALANCE_CANDIDATES:
                    break
            _, seed, a, counts = best
            images.append(ImageRecord(image_id, cfg.image_size, cfg.image_size, seed=int(seed)))
            if a:
                anns[image_id] = a
        return fully_labeled(self.categories, images, anns, metadata={"synthetic": asdict(cfg)})


def synthetic_shapes(config: SyntheticConfig) -> tuple[DatasetManifest, SyntheticShapes]:
    gen = SyntheticShapes(config)
    return gen.manifest(), gen
