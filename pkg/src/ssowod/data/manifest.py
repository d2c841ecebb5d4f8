"""Dataset manifest types and their JSON persistence.

Manifest JSON layout (``schema_version`` 1)::

    {
      "schema_version": 1,
      "categories": ["circle", "square", ...],       # class id == list index
      "images": [{"id": 0, "width": 64, "height": 64,
                  "path": null, "seed": 1234}, ...],
      "annotations": [{"image_id": 0, "label": 2,
                       "box": [cx, cy, w, h] | [cx, cy, w, h, theta]}, ...],
      "labeled_ids": [0, 3, ...],
      "unlabeled_ids": [1, 2, ...],
      "metadata": {"task": 2, "fraction": 0.5,
                   "achieved_proportions": {"triangle": 0.52, ...}, ...}
    }

Boxes are normalized; ``label == -1`` is the UNKNOWN class.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

from ..errors import IntegrityError, ParseError
from ..geometry import AnyBox, Box, OrientedBox

UNKNOWN = -1
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class InstanceAnnotation:
    image_id: int
    label: int
    box: AnyBox


@dataclass(frozen=True)
class ImageRecord:
    id: int
    width: int
    height: int
    path: Optional[str] = None
    seed: Optional[int] = None


@dataclass(frozen=True)
class DatasetManifest:
    """Images plus per-image annotations, split into labeled/unlabeled ids.

    Instances are immutable; derived manifests are built with
    :meth:`evolve`. ``annotations`` holds everything the manifest knows;
    :meth:`training_annotations` is what a trainer may look at.
    """

    categories: tuple[str, ...]
    images: tuple[ImageRecord, ...]
    annotations: Mapping[int, tuple[InstanceAnnotation, ...]]
    labeled_ids: frozenset[int]
    unlabeled_ids: frozenset[int] = frozenset()
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        ids = [im.id for im in self.images]
        if len(set(ids)) != len(ids):
            raise IntegrityError("duplicate image ids in manifest")
        all_ids = set(ids)
        if self.labeled_ids & self.unlabeled_ids:
            raise IntegrityError("labeled and unlabeled image ids overlap")
        if (self.labeled_ids | self.unlabeled_ids) != all_ids:
            raise IntegrityError("labeled/unlabeled ids do not partition the images")
        missing = set(self.annotations) - all_ids
        if missing:
            raise IntegrityError(f"annotations reference missing images {sorted(missing)[:5]}")

    @property
    def image_ids(self) -> list[int]:
        return [im.id for im in self.images]

    def image(self, image_id: int) -> ImageRecord:
        for im in self.images:
            if im.id == image_id:
                return im
        raise KeyError(image_id)

    def instances(self, image_id: int) -> tuple[InstanceAnnotation, ...]:
        return self.annotations.get(image_id, ())

    def training_annotations(self, image_id: int) -> tuple[InstanceAnnotation, ...]:
        """Annotations visible to a trainer: none for unlabeled images."""
        if image_id in self.unlabeled_ids:
            return ()
        return self.instances(image_id)

    def all_instances(self) -> Iterable[InstanceAnnotation]:
        for im in self.images:
            yield from self.instances(im.id)

    def class_counts(self, image_ids: Optional[Iterable[int]] = None) -> dict[int, int]:
        ids = self.image_ids if image_ids is None else image_ids
        counts: dict[int, int] = {}
        for i in ids:
            for ann in self.instances(i):
                counts[ann.label] = counts.get(ann.label, 0) + 1
        return counts

    def class_id(self, name: str) -> int:
        return self.categories.index(name)

    def evolve(self, **changes) -> "DatasetManifest":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        anns = [
            {"image_id": a.image_id, "label": a.label, "box": list(a.box.as_tuple())}
            for im in self.images
            for a in self.instances(im.id)
        ]
        return {
            "schema_version": SCHEMA_VERSION,
            "categories": list(self.categories),
            "images": [
                {"id": im.id, "width": im.width, "height": im.height, "path": im.path, "seed": im.seed}
                for im in self.images
            ],
            "annotations": anns,
            "labeled_ids": sorted(self.labeled_ids),
            "unlabeled_ids": sorted(self.unlabeled_ids),
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DatasetManifest":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ParseError(f"unsupported manifest schema_version {d.get('schema_version')!r}")
        try:
            images = tuple(
                ImageRecord(int(im["id"]), int(im["width"]), int(im["height"]), im.get("path"), im.get("seed"))
                for im in d["images"]
            )
            grouped: dict[int, list[InstanceAnnotation]] = {}
            for a in d["annotations"]:
                box = OrientedBox(*a["box"]) if len(a["box"]) == 5 else Box(*a["box"])
                grouped.setdefault(int(a["image_id"]), []).append(
                    InstanceAnnotation(int(a["image_id"]), int(a["label"]), box)
                )
            return cls(
                categories=tuple(d["categories"]),
                images=images,
                annotations={k: tuple(v) for k, v in grouped.items()},
                labeled_ids=frozenset(int(i) for i in d["labeled_ids"]),
                unlabeled_ids=frozenset(int(i) for i in d["unlabeled_ids"]),
                metadata=dict(d.get("metadata", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, IntegrityError):
                raise
            raise ParseError(f"malformed manifest: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
        return cls.from_dict(d)


def fully_labeled(categories, images, annotations, metadata=None) -> DatasetManifest:
    """Convenience constructor for a manifest where every image is labeled."""
    images = tuple(images)
    return DatasetManifest(
        categories=tuple(categories),
        images=images,
        annotations=dict(annotations),
        labeled_ids=frozenset(im.id for im in images),
        metadata=dict(metadata or {}),
    )
