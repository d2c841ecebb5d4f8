"""Run configuration (validated with pydantic; unknown keys are rejected).

Config files are plain YAML or JSON documents; no environment-variable
interpolation is performed.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError, ParseError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DetectorSettings(_Strict):
    num_queries: int = Field(250, ge=1)
    embed_dim: int = Field(64, ge=8, multiple_of=8)
    num_scales: int = Field(3, ge=1)
    num_heads: int = Field(4, ge=1)
    enc_layers: int = Field(2, ge=1)
    dec_layers: int = Field(2, ge=1)
    input_size: int = Field(128, ge=16)
    backbone_width: int = Field(32, ge=16, multiple_of=16)
    oriented: bool = False


class OptimSettings(_Strict):
    lr: float = Field(1e-4, gt=0)
    weight_decay: float = Field(1e-4, ge=0)
    batch_size: int = Field(8, ge=2)
    epochs: int = Field(50, ge=0, description="task-1 supervised epochs")
    align_epochs: int = Field(40, ge=0)
    finetune_epochs: int = Field(10, ge=0)
    grad_clip: float = Field(0.1, ge=0)
    lr_drop: float = Field(1.0, gt=0, le=1, description="fraction of a phase after which lr is divided by 10")


class PseudoSettings(_Strict):
    enabled: bool = True
    k: int = Field(10, ge=1)
    aggregation: Literal["mean", "max"] = "mean"
    scorer: Literal["query", "encoder", "backbone"] = "query"
    overlap_threshold: float = Field(0.0, ge=0, le=1)
    on_unlabeled: bool = False
    # from task 2 on, queries over objects the detached model recognises as a
    # previous class are neither pseudo-labeled nor pushed to background
    guard_previous: bool = True
    guard_threshold: float = Field(0.3, ge=0, le=1)
    guard_iou: float = Field(0.5, gt=0, le=1)


class AugmentSettings(_Strict):
    enabled: list[Literal["color_jitter", "gaussian_blur", "greyscale", "posterize", "solarize"]] = [
        "color_jitter",
        "gaussian_blur",
        "greyscale",
    ]
    params: dict[str, dict[str, float]] = {}


class LossSettings(_Strict):
    alpha: float = Field(1.0, ge=0)
    background_weight: float = Field(0.1, ge=0)
    background_target: Literal["uniform", "not_unknown"] = "uniform"
    lambda_offdiag: float = Field(5e-3, ge=0)
    cur_weight: float = Field(1.0, ge=0)
    match_cls: float = 2.0
    match_l1: float = 5.0
    match_giou: float = 2.0


class SSLSettings(_Strict):
    enabled: bool = True


class SyntheticSettings(_Strict):
    num_classes: int = Field(4, ge=2)
    num_images: int = Field(200, ge=1)
    num_test_images: int = Field(100, ge=1)
    min_instances: int = Field(1, ge=1)
    max_instances: int = Field(4, ge=1)
    min_size: float = 0.15
    max_size: float = 0.35
    rotate: bool = True


class TaskSettings(_Strict):
    classes: list[str]
    fraction: float = Field(1.0, gt=0, le=1)


class DataSettings(_Strict):
    synthetic: Optional[SyntheticSettings] = None
    train_manifest: Optional[str] = None
    test_manifest: Optional[str] = None
    image_root: Optional[str] = None
    schedule: list[TaskSettings]

    @model_validator(mode="after")
    def _one_source(self):
        if (self.synthetic is None) == (self.train_manifest is None):
            raise ValueError("exactly one of data.synthetic or data.train_manifest must be set")
        if self.train_manifest is not None and self.test_manifest is None:
            raise ValueError("data.test_manifest is required with data.train_manifest")
        return self


class EvalSettings(_Strict):
    top_k: int = Field(20, ge=1)
    iou_threshold: float = Field(0.5, gt=0, le=1)


class RunConfig(_Strict):
    name: str = "run"
    seed: int = 42
    detector: DetectorSettings = DetectorSettings()
    optim: OptimSettings = OptimSettings()
    pseudo: PseudoSettings = PseudoSettings()
    augment: AugmentSettings = AugmentSettings()
    loss: LossSettings = LossSettings()
    ssl: SSLSettings = SSLSettings()
    eval: EvalSettings = EvalSettings()
    data: DataSettings

    def fingerprint(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Apply dotted-key overrides, e.g. ``{"pseudo.aggregation": "max"}``."""
        d = self.model_dump(mode="json")
        for key, value in overrides.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node, dict) or p not in node:
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if not isinstance(node, dict) or parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return validate_config(d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.model_dump(mode="json"), indent=1, sort_keys=True) + "\n")


def validate_config(d: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(d)
    except ValidationError as exc:
        lines = [f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in exc.errors()]
        raise ConfigError("invalid run config:\n  " + "\n  ".join(lines)) from exc


def load_config(path: str | Path) -> RunConfig:
    text = Path(path).read_text()
    try:
        d = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return validate_config(d)
