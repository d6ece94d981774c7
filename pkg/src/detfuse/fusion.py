"""Ensembling detections across models and test-time scales.

:func:`wbf` implements Weighted Boxes Fusion, :func:`nms` the greedy
suppression baseline, and :func:`merge_multiscale` brings predictions made on
resized renditions back to the original frame before fusing them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from ._backend import kernels
from .geometry import BBox, ImageMeta, boxes_to_array, rescale


@dataclass(frozen=True)
class DetectionSet:
    """Boxes predicted for one image by one source (model x scale)."""

    image_id: str
    source_id: str = ""
    frame: Optional[ImageMeta] = None
    boxes: tuple[BBox, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if self.frame is not None and self.frame.image_id != self.image_id:
            raise ValueError(f"frame belongs to {self.frame.image_id!r}, not {self.image_id!r}")

    def __len__(self):
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)

    def with_boxes(self, boxes, source_id: Optional[str] = None) -> "DetectionSet":
        return DetectionSet(self.image_id, self.source_id if source_id is None else source_id, self.frame, tuple(boxes))

    def sorted(self) -> "DetectionSet":
        order = sorted(range(len(self.boxes)), key=lambda i: -self.boxes[i].confidence)
        return self.with_boxes([self.boxes[i] for i in order])


@dataclass(frozen=True)
class FusionConfig:
    iou_threshold: float = 0.55
    source_weights: Mapping[str, float] = field(default_factory=dict)
    skip_threshold: float = 0.0
    count_rescale: bool = True

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError("iou_threshold must lie in (0, 1]")
        if not 0.0 <= self.skip_threshold < 1.0:
            raise ValueError("skip_threshold must lie in [0, 1)")
        for name, w in self.source_weights.items():
            if not w > 0:
                raise ValueError(f"weight of source {name!r} must be positive")

    def weight(self, source_id: str) -> float:
        return float(self.source_weights.get(source_id, 1.0))


def _common_image(sets: Sequence[DetectionSet]) -> tuple[str, Optional[ImageMeta]]:
    ids = sorted({s.image_id for s in sets})
    if len(ids) > 1:
        raise ValueError(f"cannot fuse detections of different images: {ids}")
    frames = [s.frame for s in sets if s.frame is not None]
    for f in frames[1:]:
        if (f.width, f.height) != (frames[0].width, frames[0].height):
            raise ValueError(
                f"image {ids[0]!r}: detection sets are in different frames "
                f"({frames[0].width}x{frames[0].height} vs {f.width}x{f.height}); rescale them first"
            )
    return ids[0], (frames[0] if frames else None)


class _Cluster:
    __slots__ = ("members", "confs", "wsum", "wcoords", "csum", "swsum", "coords", "sources")

    def __init__(self):
        self.members = []
        self.confs = []
        self.wsum = 0.0
        self.wcoords = np.zeros(4)
        self.csum = 0.0
        self.swsum = 0.0
        self.sources = set()

    def add(self, coords: np.ndarray, conf: float, sw: float, source: str):
        self.members.append(coords)
        self.confs.append(conf)
        w = conf * sw
        self.wsum += w
        self.wcoords += w * coords
        self.csum += sw * conf
        self.swsum += sw
        self.sources.add(source)
        if len(self.members) == 1:
            self.coords = coords
        elif self.wsum > 0.0:
            self.coords = self.wcoords / self.wsum
        else:
            # all members at zero confidence: plain average
            self.coords = np.mean(self.members, axis=0)

    @property
    def confidence(self) -> float:
        if len(self.confs) == 1:
            return self.confs[0]
        return self.csum / self.swsum


def wbf(sets: Sequence[DetectionSet], cfg: FusionConfig = FusionConfig(), frame: Optional[ImageMeta] = None) -> DetectionSet:
    """Weighted Boxes Fusion of same-image detection sets in a common frame.

    Boxes of each class are visited in descending confidence (ties by source
    id, then position in their set).  A box joins the first cluster, in
    creation order, whose current fused box overlaps it with IoU at least
    ``cfg.iou_threshold``; otherwise it seeds a new cluster.  Fused corners
    are averages weighted by ``confidence * source_weight``; fused confidence
    is the source-weighted mean confidence, scaled by ``T / N`` when
    ``cfg.count_rescale`` (``T`` distinct sources in the cluster, ``N``
    sources overall).
    """
    sets = list(sets)
    if not sets:
        if frame is None:
            return DetectionSet("", "wbf")
        return DetectionSet(frame.image_id, "wbf", frame)
    image_id, common = _common_image(sets)
    frame = frame or common
    n_sources = len({s.source_id for s in sets})

    entries = []
    for s in sets:
        sw = cfg.weight(s.source_id)
        for idx, b in enumerate(s.boxes):
            if b.confidence < cfg.skip_threshold:
                continue
            entries.append((b, s.source_id, idx, sw))
    entries.sort(key=lambda e: (-e[0].confidence, e[1], e[2]))

    clusters_by_class: dict[int, list[_Cluster]] = {}
    for b, source, _, sw in entries:
        clusters = clusters_by_class.setdefault(b.class_id, [])
        coords = np.array(b.coords, dtype=np.float64)
        target = None
        if clusters:
            fused = np.array([c.coords for c in clusters])
            hits = np.flatnonzero(kernels.iou_matrix(coords[None, :], fused)[0] >= cfg.iou_threshold)
            if hits.size:
                target = clusters[hits[0]]
        if target is None:
            target = _Cluster()
            clusters.append(target)
        target.add(coords, b.confidence, sw, source)

    out = []
    for class_id in sorted(clusters_by_class):
        for c in clusters_by_class[class_id]:
            conf = c.confidence
            if cfg.count_rescale:
                conf *= min(len(c.sources), n_sources) / n_sources
            x1, y1, x2, y2 = (float(v) for v in c.coords)
            out.append(BBox(x1, y1, x2, y2, class_id, min(1.0, conf)))
    out.sort(key=lambda b: -b.confidence)
    return DetectionSet(image_id, "wbf", frame, tuple(out))


def nms(dets: DetectionSet, iou_threshold: float = 0.5) -> DetectionSet:
    """Greedy per-class non-maximum suppression (IoU >= threshold suppresses)."""
    by_class: dict[int, list[int]] = {}
    for i, b in enumerate(dets.boxes):
        by_class.setdefault(b.class_id, []).append(i)
    kept = []
    for idx in by_class.values():
        idx.sort(key=lambda i: -dets.boxes[i].confidence)
        arr = boxes_to_array(dets.boxes[i] for i in idx)
        kept.extend(idx[k] for k in kernels.nms_keep(arr, float(iou_threshold)))
    kept.sort(key=lambda i: (-dets.boxes[i].confidence, i))
    return dets.with_boxes([dets.boxes[i] for i in kept])


def merge_multiscale(sets: Sequence[DetectionSet], original: ImageMeta, cfg: FusionConfig = FusionConfig()) -> DetectionSet:
    """Rescale per-scale predictions to ``original`` and fuse them with :func:`wbf`."""
    rescaled = []
    for s in sets:
        if s.frame is None or s.frame.scale_tag is None:
            raise ValueError(f"detections {s.source_id!r} of image {s.image_id!r} carry no scale_tag")
        boxes = [rescale(b, s.frame, original) for b in s.boxes]
        rescaled.append(DetectionSet(s.image_id, s.source_id, original, tuple(boxes)))
    return wbf(rescaled, cfg, frame=original)
