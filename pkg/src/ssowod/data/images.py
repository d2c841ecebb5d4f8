"""Pixel access for manifest images (synthetic seeds or files on disk)."""
from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import DataError
from .manifest import DatasetManifest, ImageRecord
from .synthetic import SyntheticConfig, SyntheticShapes


class ImageStore:
    """Returns ``(S, S, 3)`` float32 images resized to the model input size.

    Rendered/decoded images are cached in memory; this is meant for
    desk-scale datasets only.
    """

    def __init__(self, input_size: int, synthetic: Optional[SyntheticConfig] = None, root: str | Path | None = None):
        self.input_size = input_size
        self.generator = SyntheticShapes(synthetic) if synthetic is not None else None
        self.root = Path(root) if root is not None else None
        self._cache: dict[tuple, np.ndarray] = {}

    @classmethod
    def for_manifest(cls, manifest: DatasetManifest, input_size: int, root=None) -> "ImageStore":
        syn = manifest.metadata.get("synthetic")
        return cls(input_size, SyntheticConfig(**syn) if syn else None, root)

    def load(self, record: ImageRecord) -> np.ndarray:
        key = (record.seed, record.path)
        if key not in self._cache:
            self._cache[key] = self._load(record)
        return self._cache[key]

    def _load(self, record: ImageRecord) -> np.ndarray:
        if record.seed is not None and self.generator is not None:
            img = self.generator.render(record.seed)
        elif record.path is not None:
            from PIL import Image

            path = Path(record.path)
            if not path.is_absolute() and self.root is not None:
                path = self.root / path
            if not path.exists():
                raise DataError(f"image file not found: {path}")
            with Image.open(path) as im:
                img = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        else:
            raise DataError(f"image {record.id} has neither a synthetic seed nor a path")
        if img.shape[:2] != (self.input_size, self.input_size):
            from PIL import Image

            pil = Image.fromarray((img * 255).astype(np.uint8))
            img = np.asarray(pil.resize((self.input_size, self.input_size), Image.BILINEAR), dtype=np.float32) / 255.0
        return img
