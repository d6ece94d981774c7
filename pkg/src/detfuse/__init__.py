"""Detection tooling: augmentation, TTA merging, box fusion and COCO-style evaluation."""

__version__ = "0.1.0"

from ._backend import BACKEND
from .augment import (
    AugmentPipeline,
    AugmentSpec,
    apply_pipeline,
    blur,
    clahe,
    fog,
    gaussian_noise,
    mixed_space_enhance,
    salt_pepper,
)
from .evaluation import EvalReport, GroundTruth, MatchResult, average_precision, evaluate, match
from .fusion import DetectionSet, FusionConfig, merge_multiscale, nms, wbf
from .geometry import BBox, ImageMeta, area_fraction, iou, iou_matrix, rescale
from .postprocess import AreaRule, ClassThresholds, filter_area, filter_confidence

__all__ = [
    "BACKEND",
    "AreaRule",
    "AugmentPipeline",
    "AugmentSpec",
    "BBox",
    "ClassThresholds",
    "DetectionSet",
    "EvalReport",
    "FusionConfig",
    "GroundTruth",
    "ImageMeta",
    "MatchResult",
    "apply_pipeline",
    "area_fraction",
    "average_precision",
    "blur",
    "clahe",
    "evaluate",
    "filter_area",
    "filter_confidence",
    "fog",
    "gaussian_noise",
    "iou",
    "iou_matrix",
    "match",
    "merge_multiscale",
    "mixed_space_enhance",
    "nms",
    "rescale",
    "salt_pepper",
    "wbf",
]
