"""End-to-end run: split -> augment -> filter -> fuse -> eval, driven by one JSON config."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .augment import STOCHASTIC, AugmentPipeline, apply_pipeline
from .dataio import (
    SCHEMA,
    DatasetManifest,
    FormatError,
    ManifestEntry,
    SplitSpec,
    dump_json,
    load_annotations,
    load_predictions,
    read_image,
    save_annotations,
    save_predictions,
    split,
    write_atomic,
    write_image,
)
from .evaluation import DEFAULT_IOU_THRESHOLDS, EvalReport, GroundTruth, evaluate, parse_iou_thresholds
from .fusion import DetectionSet, FusionConfig, merge_multiscale, nms, wbf
from .geometry import ImageMeta, rescale
from .postprocess import AreaRule, ClassThresholds, filter_area, filter_confidence


def needs_seed(pipeline: AugmentPipeline) -> bool:
    return any(s.kind in STOCHASTIC and s.seed is None for s in pipeline)


def augment_images(
    manifest: DatasetManifest,
    gts: Mapping[str, GroundTruth],
    pipeline: AugmentPipeline,
    out_dir,
    seed: Optional[int],
    image_ids: Optional[Sequence[str]] = None,
    jobs: int = 1,
) -> tuple[DatasetManifest, dict[str, GroundTruth]]:
    """Augment images (and their boxes) into ``out_dir`` as PNG plus ``annotations.json``."""
    out_dir = Path(out_dir)
    wanted = set(image_ids) if image_ids is not None else None
    entries = [e for e in manifest.entries if wanted is None or e.image_id in wanted]

    def work(entry: ManifestEntry):
        img = read_image(manifest.path(entry))
        gt = gts.get(entry.image_id, GroundTruth(entry.image_id))
        img, boxes = apply_pipeline(img, gt.boxes, pipeline, seed, entry.image_id)
        name = Path(entry.file_name).stem + ".png"
        write_image(out_dir / name, img)
        h, w = img.shape[:2]
        return (
            ManifestEntry(entry.image_id, name, w, h, entry.labels),
            GroundTruth(entry.image_id, tuple(boxes)),
        )

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(work, entries))
    new_manifest = DatasetManifest(
        tuple(r[0] for r in results), manifest.class_names, manifest.category_ids, str(out_dir)
    )
    new_gts = {r[1].image_id: r[1] for r in results}
    save_annotations(new_manifest, new_gts, out_dir / "annotations.json")
    return new_manifest, new_gts


def original_frame(sets: Sequence[DetectionSet], frames: Optional[Mapping[str, ImageMeta]] = None) -> Optional[ImageMeta]:
    image_id = sets[0].image_id
    if frames and image_id in frames:
        f = frames[image_id]
        return ImageMeta(f.image_id, f.width, f.height, 1.0)
    for s in sets:
        if s.frame is not None:
            scale = s.frame.scale_tag or 1.0
            return ImageMeta(image_id, max(1, round(s.frame.width / scale)), max(1, round(s.frame.height / scale)), 1.0)
    return None


def _tagged(ds: DetectionSet, orig: ImageMeta) -> DetectionSet:
    """Untagged frames are taken to be the original scale."""
    if ds.frame is not None and ds.frame.scale_tag is not None:
        return ds
    frame = ImageMeta(ds.image_id, ds.frame.width, ds.frame.height, 1.0) if ds.frame is not None else orig
    return DetectionSet(ds.image_id, ds.source_id, frame, ds.boxes)


def fuse_sources(
    sources: Sequence[Mapping[str, DetectionSet]],
    method: str = "wbf",
    cfg: FusionConfig = FusionConfig(),
    frames: Optional[Mapping[str, ImageMeta]] = None,
    nms_iou: Optional[float] = None,
) -> dict[str, DetectionSet]:
    """Fuse per-image detections from several sources; scaled renditions are merged in the original frame."""
    by_image: dict[str, list[DetectionSet]] = {}
    for src in sources:
        for image_id, ds in src.items():
            by_image.setdefault(image_id, []).append(ds)
    out = {}
    for image_id in sorted(by_image):
        sets = by_image[image_id]
        orig = original_frame(sets, frames)
        scaled = any(s.frame is not None and s.frame.scale_tag not in (None, 1.0) for s in sets)
        if method == "wbf":
            if scaled:
                out[image_id] = merge_multiscale([_tagged(s, orig) for s in sets], orig, cfg)
            else:
                out[image_id] = wbf(sets, cfg, frame=orig)
        elif method == "nms":
            boxes = []
            for s in sets:
                if s.frame is not None and orig is not None:
                    boxes.extend(rescale(b, s.frame, orig) for b in s.boxes)
                else:
                    boxes.extend(s.boxes)
            merged = DetectionSet(image_id, "nms", orig, tuple(boxes))
            out[image_id] = nms(merged, cfg.iou_threshold if nms_iou is None else nms_iou)
        else:
            raise ValueError(f"unknown fusion method {method!r}")
    return out


def filter_sets(
    sets: Mapping[str, DetectionSet], thresholds: Optional[ClassThresholds], rules: Sequence[AreaRule]
) -> dict[str, DetectionSet]:
    out = {}
    for image_id, ds in sets.items():
        if thresholds is not None:
            ds = filter_confidence(ds, thresholds)
        if rules:
            if ds.frame is not None:
                ds = filter_area(_tagged(ds, ds.frame), rules)
        out[image_id] = ds
    return out


def render_report(report: EvalReport, manifest: DatasetManifest, title: str = "Detection report") -> str:
    lines = [f"# {title}", "", report.to_table(), "## Per-class AP", ""]
    t_lo = report.iou_thresholds[0]
    lines.append(f"| Class | AP({t_lo:g}) | AP({t_lo:g}:{report.iou_thresholds[-1]:g}) |")
    lines.append("|---|---|---|")
    for c in report.classes:
        name = manifest.class_names[c] if c < len(manifest.class_names) else str(c)
        aps = [report.ap[c, t] for t in report.iou_thresholds]
        mean = None if any(a is None for a in aps) else sum(aps) / len(aps)
        fmt = lambda v: "-" if v is None else f"{v:.3f}"  # noqa: E731
        lines.append(f"| {name} | {fmt(aps[0])} | {fmt(mean)} |")
    return "\n".join(lines) + "\n"


@dataclass
class PipelineConfig:
    """Parsed pipeline configuration; relative paths resolve against ``base``."""

    annotations: Path
    predictions: list
    split: SplitSpec = SplitSpec()
    augment: Optional[AugmentPipeline] = None
    augment_seed: Optional[int] = None
    augment_subset: str = "train"
    thresholds: Optional[ClassThresholds] = None
    area_rules: tuple = ()
    fusion_method: str = "wbf"
    fusion: FusionConfig = FusionConfig()
    eval_subset: str = "val"
    iou_thresholds: tuple = DEFAULT_IOU_THRESHOLDS
    miou_mode: str = "matched"

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        return cls.from_dict(d, path.parent)

    @classmethod
    def from_dict(cls, d: Mapping, base=".") -> "PipelineConfig":
        base = Path(base)
        if d.get("schema", SCHEMA) != SCHEMA:
            raise FormatError(f"unsupported pipeline schema {d.get('schema')!r}")
        problems = []

        def resolve(p):
            q = base / p
            if not q.exists():
                problems.append(f"missing file: {p}")
            return q

        if "annotations" not in d:
            raise FormatError("pipeline config needs 'annotations'")
        ann = resolve(d["annotations"])
        preds = []
        for entry in d.get("predictions", []):
            if isinstance(entry, str):
                entry = {"path": entry}
            preds.append({**entry, "path": resolve(entry["path"])})
        if not preds:
            problems.append("pipeline config lists no prediction files")
        sp = d.get("split", {})
        aug = d.get("augment")
        flt = d.get("filter", {})
        fus = d.get("fusion", {})
        ev = d.get("eval", {})
        if problems:
            raise FormatError("invalid pipeline config", problems)
        return cls(
            annotations=ann,
            predictions=preds,
            split=SplitSpec(sp.get("per_class", 200), sp.get("ratio", 0.2), int(sp.get("seed", 0))),
            augment=AugmentPipeline.from_list(aug["pipeline"]) if aug else None,
            augment_seed=aug.get("seed") if aug else None,
            augment_subset=aug.get("subset", "train") if aug else "train",
            thresholds=ClassThresholds.from_dict(flt["class_thresholds"]) if "class_thresholds" in flt else None,
            area_rules=tuple(AreaRule.from_dict(r) for r in flt.get("area_rules", [])),
            fusion_method=fus.get("method", "wbf"),
            fusion=FusionConfig(
                float(fus.get("iou_threshold", 0.55)),
                {str(k): float(v) for k, v in fus.get("weights", {}).items()},
                float(fus.get("skip_threshold", 0.0)),
                bool(fus.get("count_rescale", True)),
            ),
            eval_subset=ev.get("subset", "val"),
            iou_thresholds=parse_iou_thresholds(ev["iou_thresholds"]) if "iou_thresholds" in ev else DEFAULT_IOU_THRESHOLDS,
            miou_mode=ev.get("miou", "matched"),
        )


def run_pipeline(cfg: PipelineConfig, out_dir, jobs: int = 1, seed: Optional[int] = None) -> EvalReport:
    """Run every stage and write ``split.json``, ``augmented/``, ``fused.json``,
    ``report.md`` and ``report.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest, gts = load_annotations(cfg.annotations, check_files=cfg.augment is not None)

    split_spec = cfg.split if seed is None else SplitSpec(cfg.split.per_class, cfg.split.ratio, seed)
    train, val = split(manifest, split_spec)
    write_atomic(out_dir / "split.json", dump_json({"schema": SCHEMA, "seed": split_spec.seed, "train": train, "val": val}))

    if cfg.augment is not None:
        aug_seed = cfg.augment_seed if seed is None else seed
        if aug_seed is None and needs_seed(cfg.augment):
            raise ValueError("the augmentation pipeline has stochastic ops; a seed is required")
        subset = {"train": train, "val": val, "all": None}[cfg.augment_subset]
        augment_images(manifest, gts, cfg.augment, out_dir / "augmented", aug_seed, subset, jobs)

    frames = manifest.frames()
    cats = manifest.category_map()
    sources = []
    for entry in cfg.predictions:
        sets = load_predictions(entry["path"], cats, frames)
        source_id = entry.get("source_id") or Path(entry["path"]).stem
        sets = {k: DetectionSet(v.image_id, v.source_id or source_id, v.frame, v.boxes) for k, v in sets.items()}
        sources.append(filter_sets(sets, cfg.thresholds, cfg.area_rules))
    fused = fuse_sources(sources, cfg.fusion_method, cfg.fusion, frames)
    save_predictions(fused.values(), out_dir / "fused.json", manifest.category_ids)

    keep = {"val": set(val), "train": set(train), "all": set(gts)}[cfg.eval_subset]
    report = evaluate(
        {k: v for k, v in fused.items() if k in keep},
        {k: v for k, v in gts.items() if k in keep},
        cfg.iou_thresholds,
        miou_mode=cfg.miou_mode,
    )
    write_atomic(out_dir / "report.md", render_report(report, manifest, f"Detection report ({cfg.eval_subset} images)"))
    write_atomic(out_dir / "report.json", report.to_json())
    return report
