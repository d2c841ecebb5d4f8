from .augment import AugmentationSpec, augment, augment_sample
from .images import ImageStore
from .manifest import UNKNOWN, DatasetManifest, ImageRecord, InstanceAnnotation
from .parsers import parse_coco, parse_dota
from .splits import assert_no_leakage, generate_task_splits, partial_label_split
from .synthetic import SyntheticConfig, SyntheticShapes, synthetic_shapes

__all__ = [
    "UNKNOWN",
    "AugmentationSpec",
    "DatasetManifest",
    "ImageRecord",
    "ImageStore",
    "InstanceAnnotation",
    "SyntheticConfig",
    "SyntheticShapes",
    "assert_no_leakage",
    "augment",
    "augment_sample",
    "generate_task_splits",
    "parse_coco",
    "parse_dota",
    "partial_label_split",
    "synthetic_shapes",
]
