"""COCO-style detection metrics: AP per class and IoU threshold, mAP, mIoU.

Matching is greedy by prediction confidence; each prediction takes the
unmatched same-class ground-truth box it overlaps most (ties to the lower GT
index).  AP is the mean of interpolated precision at the 101 recall points
0, 0.01, ..., 1, where interpolated precision at ``r`` is the best precision
reached at any recall >= ``r`` (0 if ``r`` is never reached).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .fusion import DetectionSet
from .geometry import BBox, boxes_to_array, iou_matrix

RECALL_POINTS = 101
# thresholds in hundredths so 0.50 ... 0.95 are exact decimal fractions
DEFAULT_IOU_THRESHOLDS = tuple(t / 100 for t in range(50, 100, 5))

MIOU_DEFINITIONS = {
    "matched": "mean IoU of true-positive matches at IoU 0.50",
    "best": "mean over ground-truth boxes of the best IoU with any same-class prediction",
}


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    boxes: tuple[BBox, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))

    def __len__(self):
        return len(self.boxes)


@dataclass(frozen=True)
class MatchResult:
    matches: tuple[tuple[int, int, float], ...]
    false_positives: tuple[int, ...]
    false_negatives: tuple[int, ...]


def _confidence_order(boxes: Sequence[BBox]) -> list[int]:
    return sorted(range(len(boxes)), key=lambda i: -boxes[i].confidence)


def _greedy(order, pred_cls, gt_cls, ious, thr):
    """Per-prediction matched GT index (-1 for none), following ``order``."""
    taken = np.zeros(len(gt_cls), dtype=bool)
    assigned = np.full(len(pred_cls), -1, dtype=np.intp)
    if len(gt_cls) == 0:
        return assigned
    for p in order:
        ok = (~taken) & (gt_cls == pred_cls[p]) & (ious[p] >= thr)
        if not ok.any():
            continue
        cand = np.where(ok, ious[p], -1.0)
        g = int(np.argmax(cand))  # first maximum: lowest GT index on ties
        taken[g] = True
        assigned[p] = g
    return assigned


def match(preds: DetectionSet, gt: GroundTruth, iou_thr: float) -> MatchResult:
    """One-to-one greedy matching of one image's predictions to its ground truth."""
    if preds.image_id != gt.image_id:
        raise ValueError(f"predictions for {preds.image_id!r} matched against ground truth of {gt.image_id!r}")
    ious = iou_matrix(boxes_to_array(preds.boxes), boxes_to_array(gt.boxes))
    pred_cls = np.array([b.class_id for b in preds.boxes], dtype=np.int64)
    gt_cls = np.array([b.class_id for b in gt.boxes], dtype=np.int64)
    order = _confidence_order(preds.boxes)
    assigned = _greedy(order, pred_cls, gt_cls, ious, iou_thr)
    matches = tuple((p, int(assigned[p]), float(ious[p, assigned[p]])) for p in order if assigned[p] >= 0)
    matched_gt = {g for _, g, _ in matches}
    return MatchResult(
        matches,
        tuple(p for p in order if assigned[p] < 0),
        tuple(g for g in range(len(gt.boxes)) if g not in matched_gt),
    )


def interpolated_ap(tp_flags: Sequence[bool], npos: int) -> Optional[float]:
    """101-point AP of a ranked TP/FP sequence given ``npos`` positives."""
    if npos == 0:
        return None
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.int64))
    if tp.size == 0 or tp[-1] == 0:
        return 0.0
    precision = tp / np.arange(1, tp.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # first rank with recall >= k/100, compared exactly as 100*tp >= k*npos
    first = np.searchsorted(100 * tp, np.arange(RECALL_POINTS) * npos, side="left")
    reached = first < tp.size
    values = np.zeros(RECALL_POINTS)
    values[reached] = envelope[first[reached]]
    return float(values.sum() / RECALL_POINTS)


@dataclass
class _ImageState:
    image_id: str
    preds: list[BBox]
    gts: tuple[BBox, ...]
    order: list[int]
    ious: np.ndarray
    pred_cls: np.ndarray
    gt_cls: np.ndarray
    assigned: dict = field(default_factory=dict)


def _prepare(preds: Mapping[str, DetectionSet], gts: Mapping[str, GroundTruth], max_dets: Optional[int]):
    states = []
    for image_id in gts:
        gt = gts[image_id]
        ds = preds.get(image_id)
        boxes = list(ds.boxes) if ds is not None else []
        order = _confidence_order(boxes)
        if max_dets is not None:
            order = order[:max_dets]
            boxes = [boxes[i] for i in order]
            order = list(range(len(boxes)))
        states.append(
            _ImageState(
                image_id,
                boxes,
                gt.boxes,
                order,
                iou_matrix(boxes_to_array(boxes), boxes_to_array(gt.boxes)),
                np.array([b.class_id for b in boxes], dtype=np.int64),
                np.array([b.class_id for b in gt.boxes], dtype=np.int64),
            )
        )
    return states


def _assignment(state: _ImageState, thr: float) -> np.ndarray:
    if thr not in state.assigned:
        state.assigned[thr] = _greedy(state.order, state.pred_cls, state.gt_cls, state.ious, thr)
    return state.assigned[thr]


def _ranked_flags(states, class_id: int, thr: float):
    """Dataset-wide (confidence, tp) list for one class, ranked by confidence."""
    ranked = []
    for img_idx, st in enumerate(states):
        assigned = _assignment(st, thr)
        for rank, p in enumerate(st.order):
            if st.pred_cls[p] == class_id:
                ranked.append((-st.preds[p].confidence, img_idx, rank, bool(assigned[p] >= 0)))
    ranked.sort()
    return [(-r[0], r[3]) for r in ranked]


def _as_mapping(items, kind) -> dict:
    if isinstance(items, Mapping):
        return dict(items)
    out = {}
    for item in items:
        if item.image_id in out:
            raise ValueError(f"duplicate {kind} entry for image {item.image_id!r}")
        out[item.image_id] = item
    return out


def average_precision(
    preds: Union[Mapping[str, DetectionSet], Iterable[DetectionSet]],
    gts: Union[Mapping[str, GroundTruth], Iterable[GroundTruth]],
    class_id: int,
    iou_thr: float,
) -> Optional[float]:
    """AP of one class at one IoU threshold; None when the class has no ground truth."""
    gts = _as_mapping(gts, "ground-truth")
    states = _prepare(_as_mapping(preds, "prediction"), gts, None)
    npos = sum(int((st.gt_cls == class_id).sum()) for st in states)
    return interpolated_ap([tp for _, tp in _ranked_flags(states, class_id, iou_thr)], npos)


def _mean(values) -> Optional[float]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    return float(sum(vals) / len(vals))


@dataclass(frozen=True)
class EvalReport:
    iou_thresholds: tuple[float, ...]
    classes: tuple[int, ...]
    ap: dict  # (class_id, threshold) -> AP or None
    precision_at: dict  # (class_id, threshold) -> precision at the operating point or None
    recall_at: dict
    map_per_threshold: tuple[Optional[float], ...]
    map_50: Optional[float]
    map_75: Optional[float]
    map_50_95: Optional[float]
    miou: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    miou_mode: str = "matched"
    average: str = "macro"
    num_images: int = 0

    COLUMNS = ("Precision", "Recall", "mAP(0.5)", "mAP(0.75)", "mAP(0.5:0.95)", "mIoU")

    def summary(self) -> dict:
        return dict(zip(self.COLUMNS, (self.precision, self.recall, self.map_50, self.map_75, self.map_50_95, self.miou)))

    def to_dict(self) -> dict:
        per_class = []
        for c in self.classes:
            per_class.append(
                {
                    "class_id": c,
                    "ap": {f"{t:.2f}": self.ap[c, t] for t in self.iou_thresholds},
                    "precision": {f"{t:.2f}": self.precision_at[c, t] for t in self.iou_thresholds},
                    "recall": {f"{t:.2f}": self.recall_at[c, t] for t in self.iou_thresholds},
                }
            )
        return {
            "schema": "detfuse/1",
            "num_images": self.num_images,
            "iou_thresholds": list(self.iou_thresholds),
            "miou_definition": MIOU_DEFINITIONS[self.miou_mode],
            "precision_recall_average": self.average,
            "metrics": {
                "precision": self.precision,
                "recall": self.recall,
                "mAP_50": self.map_50,
                "mAP_75": self.map_75,
                "mAP_50_95": self.map_50_95,
                "mIoU": self.miou,
            },
            "mAP_per_threshold": {f"{t:.2f}": m for t, m in zip(self.iou_thresholds, self.map_per_threshold)},
            "per_class": per_class,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_table(self) -> str:
        def fmt(v):
            return "-" if v is None else f"{v:.3f}"

        widths = [max(len(c), 5) for c in self.COLUMNS]
        header = " | ".join(c.center(w) for c, w in zip(self.COLUMNS, widths))
        row = " | ".join(fmt(v).center(w) for v, w in zip(self.summary().values(), widths))
        lines = [
            f"{self.num_images} images; mIoU: {MIOU_DEFINITIONS[self.miou_mode]}; "
            f"precision/recall: {self.average} average at IoU {self._pr_threshold():.2f}",
            "",
            f"| {header} |",
            "|" + "|".join("-" * (w + 2) for w in widths) + "|",
            f"| {row} |",
        ]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "value"])
        for name, v in self.summary().items():
            writer.writerow([name, "" if v is None else repr(v)])
        writer.writerow([])
        writer.writerow(["class_id", "iou_threshold", "ap", "precision", "recall"])
        for c in self.classes:
            for t in self.iou_thresholds:
                writer.writerow(
                    [c, f"{t:.2f}"] + ["" if v is None else repr(v) for v in (self.ap[c, t], self.precision_at[c, t], self.recall_at[c, t])]
                )
        return buf.getvalue()

    def _pr_threshold(self) -> float:
        return 0.5 if 0.5 in self.iou_thresholds else self.iou_thresholds[0]


def parse_iou_thresholds(text: str) -> tuple[float, ...]:
    """``"0.5:0.95:0.05"`` (inclusive range) or ``"0.5,0.75"``."""
    if ":" in text:
        lo, hi, step = (float(v) for v in text.split(":"))
        lo_c, hi_c, step_c = (int(round(v * 100)) for v in (lo, hi, step))
        if step_c <= 0 or lo_c > hi_c:
            raise ValueError(f"bad IoU threshold range {text!r}")
        values = tuple(t / 100 for t in range(lo_c, hi_c + 1, step_c))
    else:
        values = tuple(float(v) for v in text.split(","))
    for v in values:
        if not 0.0 < v <= 1.0:
            raise ValueError(f"IoU threshold {v} outside (0, 1]")
    return values


def evaluate(
    preds: Union[Mapping[str, DetectionSet], Iterable[DetectionSet]],
    gts: Union[Mapping[str, GroundTruth], Iterable[GroundTruth]],
    iou_thresholds: Sequence[float] = DEFAULT_IOU_THRESHOLDS,
    operating_threshold: Union[float, Mapping[int, float]] = 0.5,
    miou_mode: str = "matched",
    average: str = "macro",
    max_dets: Optional[int] = None,
) -> EvalReport:
    """Evaluate predictions against ground truth over a whole dataset.

    Images in ``gts`` without predictions count as all-missed; predictions
    for images absent from ``gts`` are an error.  Precision and recall use
    the predictions at or above each class's ``operating_threshold``.
    """
    if miou_mode not in MIOU_DEFINITIONS:
        raise ValueError(f"unknown mIoU mode {miou_mode!r}")
    if average not in ("macro", "micro"):
        raise ValueError(f"unknown averaging {average!r}")
    gts = _as_mapping(gts, "ground-truth")
    preds = _as_mapping(preds, "prediction")
    unknown = sorted(set(preds) - set(gts))
    if unknown:
        raise ValueError(f"predictions for images without ground truth: {unknown}")
    thresholds = tuple(float(t) for t in iou_thresholds)
    if not thresholds:
        raise ValueError("at least one IoU threshold is required")

    def op_thr(c):
        if isinstance(operating_threshold, Mapping):
            return float(operating_threshold.get(c, 0.5))
        return float(operating_threshold)

    states = _prepare(preds, gts, max_dets)
    npos: dict[int, int] = {}
    for st in states:
        for c in st.gt_cls.tolist():
            npos[c] = npos.get(c, 0) + 1
    classes = tuple(sorted(set(npos) | {int(c) for st in states for c in st.pred_cls.tolist()}))

    ap, prec_at, rec_at, counts = {}, {}, {}, {}
    for t in thresholds:
        for c in classes:
            ranked = _ranked_flags(states, c, t)
            n = npos.get(c, 0)
            ap[c, t] = interpolated_ap([tp for _, tp in ranked], n)
            above = [tp for conf, tp in ranked if conf >= op_thr(c)]
            tp_count = sum(above)
            counts[c, t] = (tp_count, len(above), n)
            prec_at[c, t] = tp_count / len(above) if above else None
            rec_at[c, t] = tp_count / n if n else None

    map_per_thr = tuple(_mean(ap[c, t] for c in classes) for t in thresholds)
    by_thr = dict(zip(thresholds, map_per_thr))
    pr_t = 0.5 if 0.5 in thresholds else thresholds[0]
    if average == "macro":
        precision = _mean(prec_at[c, pr_t] for c in classes if npos.get(c))
        recall = _mean(rec_at[c, pr_t] for c in classes if npos.get(c))
    else:
        tp_sum = sum(counts[c, pr_t][0] for c in classes)
        det_sum = sum(counts[c, pr_t][1] for c in classes)
        pos_sum = sum(npos.values())
        precision = tp_sum / det_sum if det_sum else None
        recall = tp_sum / pos_sum if pos_sum else None

    return EvalReport(
        iou_thresholds=thresholds,
        classes=classes,
        ap=ap,
        precision_at=prec_at,
        recall_at=rec_at,
        map_per_threshold=map_per_thr,
        map_50=by_thr.get(0.5),
        map_75=by_thr.get(0.75),
        map_50_95=_mean(map_per_thr) if all(m is not None for m in map_per_thr) else None,
        miou=_miou(states, miou_mode),
        precision=precision,
        recall=recall,
        miou_mode=miou_mode,
        average=average,
        num_images=len(states),
    )


def _miou(states, mode: str) -> Optional[float]:
    values = []
    for st in states:
        if mode == "matched":
            assigned = _assignment(st, 0.5)
            values.extend(float(st.ious[p, g]) for p, g in enumerate(assigned) if g >= 0)
        else:
            for g, gcls in enumerate(st.gt_cls):
                same = st.pred_cls == gcls
                values.append(float(st.ious[same, g].max()) if same.any() else 0.0)
    return _mean(values)
