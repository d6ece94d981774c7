"""Axis-aligned boxes, image frames and the overlap measures built on them."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

# Class count of the parasitic-egg challenge profile.
DEFAULT_NUM_CLASSES = 11


@dataclass(frozen=True)
class BBox:
    """Corner-form box in absolute pixel coordinates of some image frame."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int = 0
    confidence: float = 1.0

    def __post_init__(self):
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise ValueError(f"inverted box corners: {self.coords}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence!r} outside [0, 1]")
        if self.class_id < 0:
            raise ValueError(f"negative class id {self.class_id}")

    @property
    def coords(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def with_confidence(self, confidence: float) -> "BBox":
        return replace(self, confidence=confidence)

    def to_xywh(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max - self.x_min, self.y_max - self.y_min]

    @classmethod
    def from_xywh(cls, xywh: Sequence[float], class_id: int = 0, confidence: float = 1.0) -> "BBox":
        x, y, w, h = (float(v) for v in xywh)
        return cls(x, y, x + w, y + h, class_id, confidence)

    @classmethod
    def from_center(cls, cxcywh: Sequence[float], class_id: int = 0, confidence: float = 1.0) -> "BBox":
        cx, cy, w, h = (float(v) for v in cxcywh)
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, class_id, confidence)


@dataclass(frozen=True)
class ImageMeta:
    """Frame of one image rendition; ``scale_tag`` is its size relative to the original."""

    image_id: str
    width: int
    height: int
    scale_tag: Optional[float] = None

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image {self.image_id!r}: non-positive size {self.width}x{self.height}")
        if self.scale_tag is not None and self.scale_tag <= 0:
            raise ValueError(f"image {self.image_id!r}: scale_tag must be positive")

    def scaled(self, scale: float) -> "ImageMeta":
        """Frame of this image resized by ``scale`` (dimensions rounded to whole pixels)."""
        return ImageMeta(
            self.image_id,
            max(1, int(round(self.width * scale))),
            max(1, int(round(self.height * scale))),
            scale,
        )


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 when the union is empty."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(0.0, iw) * max(0.0, ih)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def rescale(box: BBox, src: ImageMeta, dst: ImageMeta) -> BBox:
    """Map ``box`` from frame ``src`` to frame ``dst`` of the same image."""
    if src.image_id != dst.image_id:
        raise ValueError(f"cannot rescale between images {src.image_id!r} and {dst.image_id!r}")
    if src.width == dst.width and src.height == dst.height:
        return box
    sx = dst.width / src.width
    sy = dst.height / src.height
    return BBox(box.x_min * sx, box.y_min * sy, box.x_max * sx, box.y_max * sy, box.class_id, box.confidence)


def area_fraction(box: BBox, img: ImageMeta) -> float:
    return min(1.0, max(0.0, box.area / (img.width * img.height)))


def boxes_to_array(boxes: Iterable[BBox]) -> np.ndarray:
    """Stack box corners into an ``(N, 4)`` float64 array."""
    arr = np.array([b.coords for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between two box collections (``BBox`` sequences or ``(N, 4)`` arrays)."""
    from ._backend import kernels

    a = a if isinstance(a, np.ndarray) else boxes_to_array(a)
    b = b if isinstance(b, np.ndarray) else boxes_to_array(b)
    return kernels.iou_matrix(
        np.ascontiguousarray(a, dtype=np.float64), np.ascontiguousarray(b, dtype=np.float64)
    )
