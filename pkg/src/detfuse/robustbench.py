"""Noise-robustness sweeps: one mAP row per detector variant, one column per noise.

Detections come either from recorded prediction files (one per condition,
produced by running a real detector on the noisy renditions, see
:func:`render_conditions`) or from a seeded simulated detector that perturbs
the ground truth with a severity-dependent jitter model.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .augment import AugmentSpec, apply_op
from .dataio import DatasetManifest, load_predictions, read_image, write_image
from .evaluation import GroundTruth, evaluate
from .fusion import DetectionSet
from .geometry import BBox
from .rng import make_rng

CONDITION_LABELS = {
    "none": "None",
    "gaussian": "Gaussian",
    "salt_pepper": "Salt & Pepper",
    "fog": "Fog",
    "blur": "Blur",
}

# Scalar severity of each noise for the simulated detector, ordered like the
# clean-trained detector's degradation: fog hurts most, then blur, S&P, Gaussian.
SEVERITY = {"none": 0.0, "gaussian": 1.0, "salt_pepper": 1.5, "blur": 2.5, "fog": 3.0}

METRICS = {
    "mAP_50": lambda r: r.map_50,
    "mAP_75": lambda r: r.map_75,
    "mAP_50_95": lambda r: r.map_50_95,
    "mIoU": lambda r: r.miou,
}


@dataclass(frozen=True)
class NoiseCondition:
    name: str
    spec: Optional[AugmentSpec] = None
    severity: Optional[float] = None

    @property
    def label(self) -> str:
        return CONDITION_LABELS.get(self.name, self.name)

    def level(self) -> float:
        if self.severity is not None:
            return float(self.severity)
        return SEVERITY.get(self.name, 1.0)


def default_conditions() -> tuple[NoiseCondition, ...]:
    return (
        NoiseCondition("none"),
        NoiseCondition("gaussian", AugmentSpec("gaussian_noise")),
        NoiseCondition("salt_pepper", AugmentSpec("salt_pepper")),
        NoiseCondition("fog", AugmentSpec("fog")),
        NoiseCondition("blur", AugmentSpec("blur")),
    )


@dataclass(frozen=True)
class NoiseSweep:
    conditions: tuple[NoiseCondition, ...] = field(default_factory=default_conditions)
    metrics: tuple[str, ...] = ("mAP_50",)
    seed: int = 0

    def __post_init__(self):
        conds = tuple(self.conditions)
        if not any(c.name == "none" for c in conds):
            conds = (NoiseCondition("none"),) + conds
        object.__setattr__(self, "conditions", conds)
        names = [c.name for c in conds]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate noise conditions in {names}")
        for m in self.metrics:
            if m not in METRICS:
                raise ValueError(f"unknown metric {m!r}; expected one of {sorted(METRICS)}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "NoiseSweep":
        conds = []
        for rec in d.get("conditions", []):
            spec = AugmentSpec.from_dict(rec["augment"]) if rec.get("augment") else None
            conds.append(NoiseCondition(rec["name"], spec, rec.get("severity")))
        return cls(
            tuple(conds) if conds else default_conditions(),
            tuple(d.get("metrics", ("mAP_50",))),
            int(d.get("seed", 0)),
        )


@dataclass(frozen=True)
class JitterModel:
    """Simulated detector whose errors grow linearly with noise severity.

    At severity ``s``: coordinate noise ``sigma_xy + sigma_per_severity * s``
    pixels per box edge, miss probability ``miss_prob + miss_per_severity * s``
    (capped at 1), Poisson spurious boxes per image at rate
    ``spurious_rate + spurious_per_severity * s`` with uniform confidence
    in [0, 1), and confidence
    ``clamp(base_confidence - decay * s + N(0, confidence_noise))``.
    """

    sigma_xy: float = 0.0
    sigma_per_severity: float = 0.0
    miss_prob: float = 0.0
    miss_per_severity: float = 0.0
    spurious_rate: float = 0.0
    spurious_per_severity: float = 0.0
    base_confidence: float = 0.9
    decay: float = 0.0
    confidence_noise: float = 0.0

    def __post_init__(self):
        for name in (
            "sigma_xy", "sigma_per_severity", "miss_per_severity", "spurious_rate",
            "spurious_per_severity", "decay", "confidence_noise",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.miss_prob <= 1.0:
            raise ValueError("miss_prob must lie in [0, 1]")
        if not 0.0 <= self.base_confidence <= 1.0:
            raise ValueError("base_confidence must lie in [0, 1]")

    def at(self, severity: float) -> tuple[float, float, float, float]:
        """(sigma, miss probability, spurious rate, mean confidence) at ``severity``."""
        return (
            self.sigma_xy + self.sigma_per_severity * severity,
            min(1.0, self.miss_prob + self.miss_per_severity * severity),
            self.spurious_rate + self.spurious_per_severity * severity,
            self.base_confidence - self.decay * severity,
        )

    @classmethod
    def from_dict(cls, d: Mapping) -> "JitterModel":
        return cls(**{k: float(v) for k, v in d.items()})


def _poisson_inverse(u: float, rate: float, cap: int = 64) -> int:
    """Smallest k with Poisson CDF(k) >= u; monotone in ``rate`` for fixed ``u``."""
    if rate <= 0:
        return 0
    p = math.exp(-rate)
    cdf, k = p, 0
    while cdf < u and k < cap:
        k += 1
        p *= rate / k
        cdf += p
    return k


def simulate_detections(
    gts: Mapping[str, GroundTruth],
    model: JitterModel,
    severity: float = 0.0,
    seed: int = 0,
    frames: Optional[Mapping] = None,
    num_classes: Optional[int] = None,
) -> dict[str, DetectionSet]:
    """Perturb ground truth into detections.

    Random draws depend only on ``(seed, image_id)``, never on the severity or
    on the model's rates, so raising any rate can only degrade a fixed draw
    (common random numbers).
    """
    if num_classes is None:
        num_classes = 1 + max((b.class_id for gt in gts.values() for b in gt.boxes), default=0)
    sigma, miss, rate, conf_mean = model.at(severity)
    out = {}
    for image_id in sorted(gts):
        gt = gts[image_id]
        frame = frames.get(image_id) if frames else None
        rng = make_rng(seed, "simulate", image_id)
        n = len(gt.boxes)
        u_miss = rng.random(n)
        z = rng.standard_normal((n, 4))
        z_conf = rng.standard_normal(n)
        u_spur = rng.random()
        spur = rng.random((64, 6))

        boxes = []
        for i, b in enumerate(gt.boxes):
            if u_miss[i] < miss:
                continue
            c = np.array(b.coords) + sigma * z[i]
            x1, x2 = sorted((c[0], c[2]))
            y1, y2 = sorted((c[1], c[3]))
            conf = min(1.0, max(0.0, conf_mean + model.confidence_noise * z_conf[i]))
            boxes.append(BBox(float(x1), float(y1), float(x2), float(y2), b.class_id, conf))

        if frame is not None:
            w, h = frame.width, frame.height
        else:
            w = max((b.x_max for b in gt.boxes), default=100.0)
            h = max((b.y_max for b in gt.boxes), default=100.0)
        for j in range(_poisson_inverse(u_spur, rate)):
            cx, cy, bw, bh, cc, cs = spur[j]
            bw, bh = 0.05 * w + 0.2 * w * bw, 0.05 * h + 0.2 * h * bh
            x1, y1 = cx * (w - bw), cy * (h - bh)
            conf = float(cs)
            boxes.append(BBox(float(x1), float(y1), float(x1 + bw), float(y1 + bh), int(cc * num_classes) % num_classes, conf))
        out[image_id] = DetectionSet(image_id, "simulated", frame, tuple(boxes))
    return out


@dataclass(frozen=True)
class RecordedSource:
    """Prediction file per condition name."""

    files: Mapping[str, Union[str, Path]]
    categories: Optional[Mapping] = None

    def detections(self, gts, condition: NoiseCondition, seed: int, frames=None) -> dict[str, DetectionSet]:
        if condition.name not in self.files:
            raise ValueError(f"no recorded predictions for condition {condition.name!r}")
        path = Path(self.files[condition.name])
        if not path.is_file():
            raise ValueError(f"prediction file for condition {condition.name!r} not found: {path}")
        return load_predictions(path, self.categories, frames)

    @classmethod
    def from_dir(cls, directory, conditions: Sequence[NoiseCondition], categories=None) -> "RecordedSource":
        directory = Path(directory)
        return cls({c.name: directory / f"{c.name}.json" for c in conditions}, categories)


@dataclass(frozen=True)
class SimulatedSource:
    model: JitterModel = JitterModel()

    def detections(self, gts, condition: NoiseCondition, seed: int, frames=None) -> dict[str, DetectionSet]:
        return simulate_detections(gts, self.model, condition.level(), seed, frames)


DetectorSource = Union[RecordedSource, SimulatedSource]


@dataclass(frozen=True)
class RobustnessReport:
    variants: tuple[str, ...]
    conditions: tuple[NoiseCondition, ...]
    metrics: tuple[str, ...]
    values: dict  # (variant, condition name, metric) -> float or None

    def value(self, variant: str, condition: str, metric: str = "mAP_50") -> Optional[float]:
        return self.values[variant, condition, metric]

    def delta(self, variant: str, condition: str, metric: str = "mAP_50") -> Optional[float]:
        v = self.values[variant, condition, metric]
        base = self.values[variant, "none", metric]
        if v is None or base is None:
            return None
        return v - base

    def to_markdown(self) -> str:
        def fmt(v, signed=False):
            if v is None:
                return "-"
            return f"{v:+.3f}" if signed else f"{v:.3f}"

        labels = [c.label for c in self.conditions]
        lines = []
        for metric in self.metrics:
            for title, signed in ((metric, False), (f"{metric} change vs. None", True)):
                lines.append(f"### {title}")
                lines.append("")
                lines.append("| Noise | " + " | ".join(labels) + " |")
                lines.append("|---" * (len(labels) + 1) + "|")
                for variant in self.variants:
                    get = self.delta if signed else self.value
                    cells = [fmt(get(variant, c.name, metric), signed) for c in self.conditions]
                    lines.append(f"| {variant} | " + " | ".join(cells) + " |")
                lines.append("")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["variant", "condition", "metric", "value", "delta"])
        for variant in self.variants:
            for c in self.conditions:
                for m in self.metrics:
                    v, d = self.value(variant, c.name, m), self.delta(variant, c.name, m)
                    writer.writerow([variant, c.name, m, "" if v is None else f"{v:.6f}", "" if d is None else f"{d:.6f}"])
        return buf.getvalue()


def run_sweep(
    gts: Mapping[str, GroundTruth],
    sources: Union[DetectorSource, Mapping[str, DetectorSource]],
    sweep: NoiseSweep = NoiseSweep(),
    frames: Optional[Mapping] = None,
) -> RobustnessReport:
    """Evaluate every detector variant under every noise condition."""
    if not isinstance(sources, Mapping):
        sources = {"detector": sources}
    values = {}
    for variant, source in sources.items():
        for cond in sweep.conditions:
            preds = source.detections(gts, cond, sweep.seed, frames)
            preds = {k: v for k, v in preds.items() if k in gts}
            report = evaluate(preds, gts)
            for m in sweep.metrics:
                values[variant, cond.name, m] = METRICS[m](report)
    return RobustnessReport(tuple(sources), sweep.conditions, sweep.metrics, values)


def render_conditions(manifest: DatasetManifest, sweep: NoiseSweep, out_dir, seed: Optional[int] = None) -> dict:
    """Write every image under every noisy condition to ``out_dir/<condition>/``.

    Returns ``{condition: directory}``; run a detector on each directory to
    obtain the recorded prediction files.
    """
    out_dir = Path(out_dir)
    seed = sweep.seed if seed is None else seed
    dirs = {}
    for cond in sweep.conditions:
        target = out_dir / cond.name
        target.mkdir(parents=True, exist_ok=True)
        for entry in manifest.entries:
            img = read_image(manifest.path(entry))
            if cond.spec is not None:
                img = apply_op(img, cond.spec, seed, entry.image_id)
            write_image(target / (Path(entry.file_name).stem + ".png"), img)
        dirs[cond.name] = target
    return dirs
