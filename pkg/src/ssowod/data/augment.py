"""Pixel-only augmentations (nothing here touches geometry).

Images are float arrays ``(H, W, 3)`` with values in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
from scipy.ndimage import gaussian_filter

OPS = ("color_jitter", "gaussian_blur", "greyscale", "posterize", "solarize")
ABBREVIATIONS = {"CJ": "color_jitter", "GB": "gaussian_blur", "GR": "greyscale", "PS": "posterize", "SL": "solarize"}

DEFAULT_PARAMS: dict[str, dict[str, float]] = {
    "color_jitter": {"p": 0.8, "brightness": 0.4, "contrast": 0.4, "saturation": 0.4},
    "gaussian_blur": {"p": 0.5, "sigma_min": 0.1, "sigma_max": 1.5},
    "greyscale": {"p": 0.2},
    "posterize": {"p": 0.5, "bits": 3},
    "solarize": {"p": 0.2, "threshold": 0.5},
}

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugmentationSpec:
    enabled: frozenset[str] = frozenset({"color_jitter", "gaussian_blur", "greyscale"})
    params: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        bad = set(self.enabled) - set(OPS)
        if bad:
            raise ValueError(f"unknown augmentations {sorted(bad)}")

    @classmethod
    def from_abbreviations(cls, codes, **kw) -> "AugmentationSpec":
        return cls(enabled=frozenset(ABBREVIATIONS[c] for c in codes), **kw)

    def param(self, op: str, name: str) -> float:
        return self.params.get(op, {}).get(name, DEFAULT_PARAMS[op][name])

    def with_seed(self, seed: int) -> "AugmentationSpec":
        return replace(self, seed=seed)


def _grey(img: np.ndarray) -> np.ndarray:
    return img @ _LUMA


def color_jitter(img, rng, brightness, contrast, saturation):
    ops = rng.permutation(3)
    for op in ops:
        if op == 0:
            img = img * rng.uniform(1 - brightness, 1 + brightness)
        elif op == 1:
            mean = _grey(img).mean()
            img = (img - mean) * rng.uniform(1 - contrast, 1 + contrast) + mean
        else:
            g = _grey(img)[..., None]
            img = (img - g) * rng.uniform(1 - saturation, 1 + saturation) + g
        img = np.clip(img, 0.0, 1.0)
    return img


def gaussian_blur(img, sigma):
    return gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")


def greyscale(img):
    return np.repeat(_grey(img)[..., None], 3, axis=-1)


def posterize(img, bits):
    levels = 2 ** int(bits)
    return np.floor(img * (levels - 1e-6)) / (levels - 1)


def solarize(img, threshold):
    return np.where(img >= threshold, 1.0 - img, img)


def augment(image: np.ndarray, spec: AugmentationSpec) -> np.ndarray:
    """Apply the enabled ops in canonical order, each with its own probability ``p``."""
    rng = np.random.default_rng(spec.seed)
    img = np.asarray(image, dtype=np.float64)
    for op in OPS:
        # draw for every op so enabling one op does not shift the others' randomness
        apply = rng.random() < spec.param(op, "p")
        sub = np.random.default_rng(rng.integers(2**32))
        if op not in spec.enabled or not apply:
            continue
        if op == "color_jitter":
            img = color_jitter(
                img,
                sub,
                spec.param(op, "brightness"),
                spec.param(op, "contrast"),
                spec.param(op, "saturation"),
            )
        elif op == "gaussian_blur":
            img = gaussian_blur(img, sub.uniform(spec.param(op, "sigma_min"), spec.param(op, "sigma_max")))
        elif op == "greyscale":
            img = greyscale(img)
        elif op == "posterize":
            img = posterize(img, spec.param(op, "bits"))
        else:
            img = solarize(img, spec.param(op, "threshold"))
    return np.clip(img, 0.0, 1.0).astype(np.asarray(image).dtype, copy=False)


def augment_sample(image, annotations, spec: AugmentationSpec):
    """Augment pixels; annotations are handed back untouched."""
    return augment(image, spec), annotations
