"""Per-class confidence thresholds and scale-aware box area filtering."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from .fusion import DetectionSet
from .geometry import area_fraction


class NoMatchingAreaRule(UserWarning):
    """Raised as a warning when no area rule covers a frame's scale."""


@dataclass(frozen=True)
class ClassThresholds:
    thresholds: Mapping[int, float] = field(default_factory=dict)
    default_threshold: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "thresholds", {int(k): float(v) for k, v in self.thresholds.items()})
        for k, v in [*self.thresholds.items(), ("default", self.default_threshold)]:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"threshold for class {k} must lie in [0, 1], got {v}")

    def __call__(self, class_id: int) -> float:
        return self.thresholds.get(class_id, self.default_threshold)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClassThresholds":
        per_class = d.get("per_class", {})
        return cls({int(k): v for k, v in per_class.items()}, float(d.get("default", 0.0)))

    def to_dict(self) -> dict:
        return {"default": self.default_threshold, "per_class": {str(k): v for k, v in sorted(self.thresholds.items())}}


@dataclass(frozen=True)
class AreaRule:
    """Area bounds for boxes predicted on frames with ``scale_min < scale_tag <= scale_max``."""

    scale_min: float = 0.0
    scale_max: float = math.inf
    max_area_fraction: float = 1.0
    min_area_fraction: float = 0.0

    def __post_init__(self):
        if not self.scale_min < self.scale_max:
            raise ValueError("empty scale range")
        if not 0.0 < self.max_area_fraction <= 1.0:
            raise ValueError("max_area_fraction must lie in (0, 1]")
        if not 0.0 <= self.min_area_fraction < 1.0:
            raise ValueError("min_area_fraction must lie in [0, 1)")
        if not self.min_area_fraction < self.max_area_fraction:
            raise ValueError("min_area_fraction must be below max_area_fraction")

    def matches(self, scale: float) -> bool:
        return self.scale_min < scale <= self.scale_max

    def keeps(self, fraction: float) -> bool:
        return self.min_area_fraction <= fraction <= self.max_area_fraction

    @classmethod
    def from_dict(cls, d: Mapping) -> "AreaRule":
        lo, hi = d.get("scale_range", (0.0, None))
        return cls(
            float(lo),
            math.inf if hi is None else float(hi),
            float(d.get("max_area_fraction", 1.0)),
            float(d.get("min_area_fraction", 0.0)),
        )

    def to_dict(self) -> dict:
        hi = None if math.isinf(self.scale_max) else self.scale_max
        return {
            "scale_range": [self.scale_min, hi],
            "max_area_fraction": self.max_area_fraction,
            "min_area_fraction": self.min_area_fraction,
        }


# Large boxes on upscaled renditions and tiny ones on downscaled renditions
# are treated as spurious.
DEFAULT_AREA_RULES = (
    AreaRule(1.5, math.inf, max_area_fraction=0.5),
    AreaRule(0.75, 1.5),
    AreaRule(0.0, 0.75, min_area_fraction=0.0005),
)


def filter_confidence(dets: DetectionSet, thr: ClassThresholds) -> DetectionSet:
    """Keep boxes whose confidence is strictly above their class threshold."""
    return dets.with_boxes(b for b in dets.boxes if b.confidence > thr(b.class_id))


def match_area_rule(rules: Sequence[AreaRule], scale: float) -> Optional[AreaRule]:
    for rule in rules:
        if rule.matches(scale):
            return rule
    return None


def filter_area(dets: DetectionSet, rules: Sequence[AreaRule] = DEFAULT_AREA_RULES) -> DetectionSet:
    """Drop boxes whose image-area fraction falls outside the rule for the frame's scale.

    With no rule covering the scale the set is returned unchanged and a
    :class:`NoMatchingAreaRule` warning is issued.
    """
    if not rules:
        return dets
    if dets.frame is None or dets.frame.scale_tag is None:
        raise ValueError(f"image {dets.image_id!r}: area filtering needs a frame with a scale_tag")
    rule = match_area_rule(rules, dets.frame.scale_tag)
    if rule is None:
        warnings.warn(
            f"image {dets.image_id!r}: no area rule for scale {dets.frame.scale_tag}", NoMatchingAreaRule, stacklevel=2
        )
        return dets
    return dets.with_boxes(b for b in dets.boxes if rule.keeps(area_fraction(b, dets.frame)))
