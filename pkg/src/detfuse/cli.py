"""``detfuse`` command line: split, augment, filter, fuse, eval, robustbench, pipeline."""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from pathlib import Path

from . import __version__
from ._backend import BACKEND
from .augment import AugmentPipeline
from .dataio import (
    SCHEMA,
    FormatError,
    SplitSpec,
    dump_json,
    load_annotations,
    parse_predictions,
    save_predictions,
    split,
    write_atomic,
    _read_json,
)
from .evaluation import DEFAULT_IOU_THRESHOLDS, evaluate, parse_iou_thresholds
from .fusion import DetectionSet, FusionConfig
from .pipeline import PipelineConfig, augment_images, filter_sets, fuse_sources, needs_seed, run_pipeline
from .postprocess import AreaRule, ClassThresholds
from .robustbench import JitterModel, NoiseSweep, RecordedSource, SimulatedSource, run_sweep


class CLIError(Exception):
    def __init__(self, message, details=()):
        super().__init__(message)
        self.details = list(details)


def _load_preds(path, manifest=None):
    """Prediction file, or an annotation file read as score-1 predictions."""
    data = _read_json(path)
    cats = manifest.category_map() if manifest is not None else None
    frames = manifest.frames() if manifest is not None else None
    fmt = None
    if isinstance(data, dict) and "annotations" in data:
        fmt = data.get("bbox_format")
        records = [
            {"image_id": a["image_id"], "category_id": a["category_id"], "bbox": a["bbox"], "score": a.get("score", 1.0)}
            for a in data["annotations"]
        ]
        if cats is None:
            cats = {c["id"]: i for i, c in enumerate(sorted(data.get("categories", []), key=lambda c: c["id"]))}
        data = records
    return parse_predictions(data, cats, frames, fmt)


def _parse_weights(text):
    weights = {}
    if not text:
        return weights
    for item in text.split(","):
        name, sep, value = item.partition("=")
        if not sep:
            raise CLIError(f"bad weight {item!r}; expected name=value")
        weights[name.strip()] = float(value)
    return weights


def _jobs(args) -> int:
    return args.jobs if args.jobs else (os.cpu_count() or 1)


def cmd_split(args):
    manifest, _ = load_annotations(args.ann)
    spec = SplitSpec(args.per_class if args.ratio is None else None, args.ratio or 0.2, args.seed)
    train, val = split(manifest, spec)
    write_atomic(args.out, dump_json({"schema": SCHEMA, "seed": args.seed, "train": train, "val": val}))
    print(f"{len(train)} train / {len(val)} val images -> {args.out}")


def cmd_augment(args):
    cfg = _read_json(args.config)
    records = cfg["pipeline"] if isinstance(cfg, dict) else cfg
    pipeline = AugmentPipeline.from_list(records)
    if args.seed is None and needs_seed(pipeline):
        raise CLIError("--seed is required: the augmentation pipeline contains stochastic ops")
    images = Path(args.images)
    if args.ann:
        manifest, gts = load_annotations(args.ann, check_files=True)
        if images.resolve() != Path(manifest.root).resolve():
            manifest = type(manifest)(manifest.entries, manifest.class_names, manifest.category_ids, str(images))
    else:
        from .dataio import DatasetManifest, ManifestEntry, read_image

        files = sorted(p for p in images.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
        entries = []
        for p in files:
            h, w = read_image(p).shape[:2]
            entries.append(ManifestEntry(p.stem, p.name, w, h))
        manifest, gts = DatasetManifest(tuple(entries), (), root=str(images)), {}
    new_manifest, _ = augment_images(manifest, gts, pipeline, args.out, args.seed, jobs=_jobs(args))
    print(f"augmented {len(new_manifest)} images -> {args.out}")


def cmd_filter(args):
    manifest = load_annotations(args.ann)[0] if args.ann else None
    sets = _load_preds(args.pred, manifest)
    thr = ClassThresholds.from_dict(_read_json(args.class_thr)) if args.class_thr else None
    rules = tuple(AreaRule.from_dict(r) for r in _read_json(args.area_rules)) if args.area_rules else ()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = filter_sets(sets, thr, rules)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    save_predictions(out.values(), args.out, manifest.category_ids if manifest else None)
    before = sum(len(s) for s in sets.values())
    after = sum(len(s) for s in out.values())
    print(f"kept {after} of {before} boxes -> {args.out}")


def cmd_fuse(args):
    manifest = load_annotations(args.ann)[0] if args.ann else None
    cfg = FusionConfig(
        args.iou_thr,
        _parse_weights(args.weights),
        args.skip_thr,
        not args.no_count_rescale,
    )
    sources = []
    for path in args.pred:
        sets = _load_preds(path, manifest)
        stem = Path(path).stem
        sources.append({k: DetectionSet(v.image_id, v.source_id or stem, v.frame, v.boxes) for k, v in sets.items()})
    fused = fuse_sources(sources, args.method, cfg, manifest.frames() if manifest else None)
    save_predictions(fused.values(), args.out, manifest.category_ids if manifest else None)
    print(f"fused {len(args.pred)} source(s) over {len(fused)} images -> {args.out}")


def cmd_eval(args):
    manifest, gts = load_annotations(args.gt)
    preds = _load_preds(args.pred, manifest)
    thresholds = parse_iou_thresholds(args.iou_thrs) if args.iou_thrs else DEFAULT_IOU_THRESHOLDS
    report = evaluate(
        preds, gts, thresholds, args.conf_thr, miou_mode=args.miou, average=args.average, max_dets=args.max_dets
    )
    text = {"table": report.to_table, "json": report.to_json, "csv": report.to_csv}[args.report]()
    if args.out:
        write_atomic(args.out, text)
    sys.stdout.write(text)


def _parse_source(text, sweep, manifest):
    name, rest = None, text
    if not text.startswith(("recorded:", "simulated:")) and "=" in text:
        name, rest = text.split("=", 1)
    kind, _, arg = rest.partition(":")
    if kind == "recorded":
        return name, RecordedSource.from_dir(arg, sweep.conditions, manifest.category_map())
    if kind == "simulated":
        params = _read_json(arg) if arg else {}
        return name, SimulatedSource(JitterModel.from_dict(params))
    raise CLIError(f"bad source {text!r}; expected [NAME=]recorded:DIR or [NAME=]simulated:PARAMS.json")


def cmd_robustbench(args):
    manifest, gts = load_annotations(args.gt)
    sweep = NoiseSweep.from_dict(_read_json(args.sweep)) if args.sweep else NoiseSweep()
    if args.seed is not None:
        sweep = NoiseSweep(sweep.conditions, sweep.metrics, args.seed)
    sources = {}
    for i, text in enumerate(args.source):
        name, source = _parse_source(text, sweep, manifest)
        if isinstance(source, SimulatedSource) and args.seed is None:
            raise CLIError("--seed is required for simulated detector sources")
        sources[name or (f"detector{i + 1}" if len(args.source) > 1 else "detector")] = source
    report = run_sweep(gts, sources, sweep, manifest.frames())
    text = report.to_csv() if str(args.out).endswith(".csv") else report.to_markdown()
    if args.out:
        write_atomic(args.out, text)
    sys.stdout.write(text)


def cmd_pipeline(args):
    cfg = PipelineConfig.load(args.config)
    if cfg.augment is not None and needs_seed(cfg.augment) and cfg.augment_seed is None and args.seed is None:
        raise CLIError("--seed is required: the augmentation pipeline contains stochastic ops without a seed")
    report = run_pipeline(cfg, args.out, _jobs(args), args.seed)
    sys.stdout.write(report.to_table())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="detfuse", description=__doc__)
    parser.add_argument(
        "--version", action="version", version=f"detfuse {__version__} (schema {SCHEMA}, kernels {BACKEND})"
    )
    parser.add_argument("--jobs", type=int, default=None, help="worker count for per-image stages (default: all CPUs)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="stratified train/validation split")
    p.add_argument("--ann", required=True)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--ratio", type=float, default=None, help="validation fraction per class instead of a count")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("augment", help="apply an augmentation pipeline to a directory of images")
    p.add_argument("--config", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--ann", help="COCO annotations; boxes are carried through geometric ops")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("filter", help="per-class confidence and scale-aware area filtering")
    p.add_argument("--pred", required=True)
    p.add_argument("--class-thr")
    p.add_argument("--area-rules")
    p.add_argument("--ann", help="annotations supplying category ids and image frames")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("fuse", help="ensemble prediction files with WBF or NMS")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--method", choices=("wbf", "nms"), default="wbf")
    p.add_argument("--iou-thr", type=float, default=0.55)
    p.add_argument("--skip-thr", type=float, default=0.0)
    p.add_argument("--weights", default="", help="source weights as name=w,...")
    p.add_argument("--no-count-rescale", action="store_true")
    p.add_argument("--ann", help="annotations supplying category ids and original frames")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="COCO-style mAP / mIoU evaluation")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--iou-thrs", default=None, help="range lo:hi:step or comma list (default 0.5:0.95:0.05)")
    p.add_argument("--report", choices=("table", "json", "csv"), default="table")
    p.add_argument("--conf-thr", type=float, default=0.5, help="operating confidence for precision/recall")
    p.add_argument("--miou", choices=("matched", "best"), default="matched")
    p.add_argument("--average", choices=("macro", "micro"), default="macro")
    p.add_argument("--max-dets", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("robustbench", help="mAP under each test-time noise")
    p.add_argument("--gt", required=True)
    p.add_argument("--source", action="append", required=True, help="[NAME=]recorded:DIR or [NAME=]simulated:PARAMS.json")
    p.add_argument("--sweep")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_robustbench)

    p = sub.add_parser("pipeline", help="split, augment, filter, fuse and evaluate from one config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (CLIError, FormatError) as exc:
        details = exc.details if isinstance(exc, CLIError) else exc.problems
        print(json.dumps({"error": str(exc).split(":\n")[0], "details": details}), file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError) as exc:
        print(json.dumps({"error": f"{type(exc).__name__}: {exc}", "details": []}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
