"""Readers for COCO-style JSON and DOTA-style per-image text annotations."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import IntegrityError, ParameterError, ParseError
from ..geometry import Box, OrientedBox, min_area_rect
from .manifest import DatasetManifest, ImageRecord, InstanceAnnotation, fully_labeled

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")


def parse_coco(path: str | Path) -> DatasetManifest:
    """Read the images/annotations/categories subset of a COCO json file.

    ``bbox`` is ``[x, y, width, height]`` in pixels; boxes are clipped to the
    image and normalized. Category ids are remapped to contiguous indices in
    ascending id order.
    """
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if exc.lineno <= len(text.splitlines()) else ""
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}: {line.strip()[:80]!r}") from exc
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise ParseError(f"{path}: missing top-level key {key!r}")

    cats = sorted(doc["categories"], key=lambda c: c["id"])
    cat_index = {c["id"]: i for i, c in enumerate(cats)}
    images = []
    sizes = {}
    for im in doc["images"]:
        rec = ImageRecord(int(im["id"]), int(im["width"]), int(im["height"]), path=im.get("file_name"))
        images.append(rec)
        sizes[rec.id] = (rec.width, rec.height)

    grouped: dict[int, list[InstanceAnnotation]] = {}
    for ann in doc["annotations"]:
        image_id = int(ann["image_id"])
        if image_id not in sizes:
            raise IntegrityError(f"{path}: annotation {ann.get('id')} references missing image {image_id}")
        if ann["category_id"] not in cat_index:
            raise IntegrityError(f"{path}: annotation {ann.get('id')} has unknown category {ann['category_id']}")
        W, H = sizes[image_id]
        x, y, w, h = (float(v) for v in ann["bbox"])
        x0, y0 = max(0.0, x), max(0.0, y)
        x1, y1 = min(float(W), x + w), min(float(H), y + h)
        if x1 <= x0 or y1 <= y0:
            continue  # zero-area after clipping
        box = Box((x0 + x1) / 2 / W, (y0 + y1) / 2 / H, (x1 - x0) / W, (y1 - y0) / H)
        grouped.setdefault(image_id, []).append(InstanceAnnotation(image_id, cat_index[ann["category_id"]], box))

    return fully_labeled(
        [c["name"] for c in cats],
        images,
        {k: tuple(v) for k, v in grouped.items()},
        metadata={"source": str(path), "format": "coco"},
    )


def _image_size(stem: str, image_dir: Optional[Path], default_size: Optional[tuple[int, int]]):
    if image_dir is not None:
        for suffix in IMAGE_SUFFIXES:
            p = image_dir / f"{stem}{suffix}"
            if p.exists():
                from PIL import Image

                with Image.open(p) as im:
                    return im.size, str(p)
    if default_size is None:
        raise ParameterError(f"no image found for {stem!r} and no default_size given")
    return default_size, None


def parse_dota(
    path: str | Path,
    image_dir: str | Path | None = None,
    default_size: Optional[tuple[int, int]] = None,
    categories: Optional[list[str]] = None,
) -> DatasetManifest:
    """Read a directory of DOTA label files (``x1 y1 ... x4 y4 class difficulty``).

    Each quadrilateral is converted to its minimum-area rectangle. Coordinates
    are normalized isotropically by ``max(width, height)`` so that rotated
    rectangles stay rectangles (DOTA tiles are square in practice).
    Difficulty flags are read and dropped. Header lines (``imagesource:``,
    ``gsd:``) are skipped.
    """
    label_dir = Path(path)
    image_dir = Path(image_dir) if image_dir is not None else None
    files = sorted(label_dir.glob("*.txt"))
    rows: list[tuple[int, str, np.ndarray]] = []
    images = []
    scales = {}
    for image_id, f in enumerate(files):
        (W, H), img_path = _image_size(f.stem, image_dir, default_size)
        images.append(ImageRecord(image_id, int(W), int(H), path=img_path))
        scales[image_id] = float(max(W, H))
        for lineno, line in enumerate(f.read_text().splitlines(), start=1):
            tokens = line.split()
            if not tokens or tokens[0].startswith(("imagesource", "gsd")):
                continue
            if len(tokens) < 9:
                raise ParseError(f"{f}:{lineno}: expected 8 coordinates and a class, got {len(tokens)} tokens")
            try:
                coords = np.array([float(t) for t in tokens[:8]]).reshape(4, 2)
            except ValueError as exc:
                raise ParseError(f"{f}:{lineno}: non-numeric coordinate ({exc})") from exc
            rows.append((image_id, tokens[8], coords))

    names = list(categories) if categories is not None else sorted({r[1] for r in rows})
    grouped: dict[int, list[InstanceAnnotation]] = {}
    for image_id, name, coords in rows:
        if name not in names:
            raise IntegrityError(f"class {name!r} not in the provided category list")
        r = min_area_rect(coords / scales[image_id])
        box = OrientedBox(
            min(max(r.cx, 0.0), 1.0), min(max(r.cy, 0.0), 1.0), min(r.w, 1.0), min(r.h, 1.0), r.theta
        )
        grouped.setdefault(image_id, []).append(InstanceAnnotation(image_id, names.index(name), box))
    return fully_labeled(
        names, images, {k: tuple(v) for k, v in grouped.items()}, metadata={"source": str(label_dir), "format": "dota"}
    )
