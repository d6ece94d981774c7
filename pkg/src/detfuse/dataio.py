"""Interchange formats, dataset splitting and the image codec boundary.

Annotations use the COCO layout (``images``, ``annotations`` with
``[x, y, w, h]`` boxes, ``categories``); category ids are remapped to dense
class ids ``0..C-1`` in order of increasing original id.  Prediction files
are COCO result records, either a bare list or wrapped in a
``{"schema": "detfuse/1", ...}`` object that also carries image frames.
See ``docs/formats.md``.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np
from PIL import Image

from .evaluation import GroundTruth
from .fusion import DetectionSet
from .geometry import BBox, ImageMeta
from .rng import make_rng

SCHEMA = "detfuse/1"

# Label space of the parasitic-egg challenge (11 classes).
PARASITE_CLASSES = (
    "Ascaris lumbricoides",
    "Capillaria philippinensis",
    "Enterobius vermicularis",
    "Fasciolopsis buski",
    "Hookworm egg",
    "Hymenolepis diminuta",
    "Hymenolepis nana",
    "Opisthorchis viverrine",
    "Paragonimus spp",
    "Taenia spp. egg",
    "Trichuris trichiura",
)

PathLike = Union[str, os.PathLike]


class FormatError(ValueError):
    """Malformed interchange file; ``problems`` lists every offending record."""

    def __init__(self, message: str, problems: Sequence[str] = ()):
        self.problems = list(problems)
        if self.problems:
            message = message + ":\n  " + "\n  ".join(self.problems)
        super().__init__(message)


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    file_name: str
    width: int
    height: int
    labels: tuple[tuple[int, int], ...] = ()  # (class_id, box count), sorted by class

    def label_counts(self) -> Counter:
        return Counter(dict(self.labels))

    def frame(self) -> ImageMeta:
        return ImageMeta(self.image_id, self.width, self.height, 1.0)


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    class_names: tuple[str, ...]
    category_ids: tuple = ()  # original category id of each dense class id
    root: str = "."

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        seen = set()
        for e in self.entries:
            if e.image_id in seen:
                raise FormatError(f"duplicate image id {e.image_id!r}")
            seen.add(e.image_id)
        if not self.category_ids:
            object.__setattr__(self, "category_ids", tuple(range(len(self.class_names))))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def by_id(self) -> dict[str, ManifestEntry]:
        return {e.image_id: e for e in self.entries}

    def frames(self) -> dict[str, ImageMeta]:
        return {e.image_id: e.frame() for e in self.entries}

    def path(self, entry: ManifestEntry) -> Path:
        return Path(self.root) / entry.file_name

    def category_map(self) -> dict:
        """Original category id -> dense class id."""
        return {orig: dense for dense, orig in enumerate(self.category_ids)}

    def missing_files(self) -> list[str]:
        return [e.file_name for e in self.entries if not self.path(e).is_file()]


# ---------------------------------------------------------------------------
# atomic output


def write_atomic(path: PathLike, data: Union[str, bytes]) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


def _read_json(path: PathLike):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None


# ---------------------------------------------------------------------------
# annotations


def _summary(boxes: Iterable[BBox]) -> tuple[tuple[int, int], ...]:
    return tuple(sorted(Counter(b.class_id for b in boxes).items()))


BBOX_FORMATS = ("xywh", "cxcywh", "xyxy")


def _bbox_format(data, override: Optional[str]) -> str:
    fmt = override or (data.get("bbox_format", "xywh") if isinstance(data, Mapping) else "xywh")
    if fmt not in BBOX_FORMATS:
        raise FormatError(f"unknown bbox_format {fmt!r}; expected one of {', '.join(BBOX_FORMATS)}")
    return fmt


def _decode_bbox(values, fmt: str) -> tuple[float, float, float, float]:
    """``(x, y, w, h)`` of a bbox stored as ``fmt``."""
    a, b, c, d = (float(v) for v in values)
    if fmt == "cxcywh":
        return a - c / 2, b - d / 2, c, d
    if fmt == "xyxy":
        return a, b, c - a, d - b
    return a, b, c, d


def parse_annotations(
    data: Mapping, root: PathLike = ".", bbox_format: Optional[str] = None
) -> tuple[DatasetManifest, dict[str, GroundTruth]]:
    """COCO annotations to a manifest and dense-class ground truth.

    Boxes are read as ``bbox_format`` (argument, else the file's
    ``bbox_format`` field, else COCO ``xywh``).
    """
    if not isinstance(data, Mapping):
        raise FormatError("annotation file must hold a JSON object")
    fmt = _bbox_format(data, bbox_format)
    problems = []
    categories = data.get("categories", [])
    try:
        cats = sorted(categories, key=lambda c: c["id"])
        cat_ids = tuple(c["id"] for c in cats)
        names = tuple(str(c.get("name", c["id"])) for c in cats)
    except (KeyError, TypeError):
        raise FormatError("every category record needs an 'id'") from None
    if len(set(cat_ids)) != len(cat_ids):
        raise FormatError(f"duplicate category ids in {list(cat_ids)}")
    dense = {orig: i for i, orig in enumerate(cat_ids)}

    images = {}
    for i, rec in enumerate(data.get("images", [])):
        try:
            image_id = str(rec["id"])
            width, height = int(rec["width"]), int(rec["height"])
            file_name = str(rec.get("file_name", image_id))
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"images[{i}]: malformed record {rec!r} ({exc})")
            continue
        if image_id in images:
            raise FormatError(f"duplicate image id {image_id!r} (images[{i}])")
        if width <= 0 or height <= 0:
            problems.append(f"images[{i}]: non-positive size {width}x{height}")
            continue
        images[image_id] = (file_name, width, height)

    boxes: dict[str, list[BBox]] = {k: [] for k in images}
    for i, rec in enumerate(data.get("annotations", [])):
        try:
            image_id = str(rec["image_id"])
            cat = rec["category_id"]
            x, y, w, h = _decode_bbox(rec["bbox"], fmt)
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"annotations[{i}]: malformed record {rec!r} ({exc})")
            continue
        if w < 0 or h < 0:
            problems.append(f"annotations[{i}]: negative width/height in bbox {rec['bbox']}")
            continue
        if image_id not in images:
            problems.append(f"annotations[{i}]: unknown image id {image_id!r}")
            continue
        if cat not in dense:
            problems.append(f"annotations[{i}]: unknown category id {cat!r}")
            continue
        boxes[image_id].append(BBox(x, y, x + w, y + h, dense[cat], 1.0))
    if problems:
        raise FormatError(f"{len(problems)} rejected annotation record(s)", problems)

    entries = tuple(
        ManifestEntry(image_id, fn, w, h, _summary(boxes[image_id])) for image_id, (fn, w, h) in images.items()
    )
    manifest = DatasetManifest(entries, names, cat_ids, str(root))
    gts = {image_id: GroundTruth(image_id, tuple(b)) for image_id, b in boxes.items()}
    return manifest, gts


def load_annotations(
    path: PathLike, check_files: bool = False, bbox_format: Optional[str] = None
) -> tuple[DatasetManifest, dict[str, GroundTruth]]:
    """Read a COCO annotation file; image paths resolve relative to its directory."""
    path = Path(path)
    manifest, gts = parse_annotations(_read_json(path), path.parent, bbox_format)
    if check_files:
        missing = manifest.missing_files()
        if missing:
            raise FormatError(f"{path}: {len(missing)} image file(s) not found", missing)
    return manifest, gts


def annotations_to_dict(manifest: DatasetManifest, gts: Mapping[str, GroundTruth]) -> dict:
    images, annotations = [], []
    for e in manifest.entries:
        images.append({"id": e.image_id, "file_name": e.file_name, "width": e.width, "height": e.height})
        gt = gts.get(e.image_id)
        for b in gt.boxes if gt is not None else ():
            annotations.append(
                {
                    "id": len(annotations) + 1,
                    "image_id": e.image_id,
                    "category_id": manifest.category_ids[b.class_id],
                    "bbox": b.to_xywh(),
                    "area": b.area,
                    "iscrowd": 0,
                }
            )
    categories = [{"id": cid, "name": name} for cid, name in zip(manifest.category_ids, manifest.class_names)]
    return {"schema": SCHEMA, "images": images, "annotations": annotations, "categories": categories}


def save_annotations(manifest: DatasetManifest, gts: Mapping[str, GroundTruth], path: PathLike) -> None:
    write_atomic(path, dump_json(annotations_to_dict(manifest, gts)))


def load_csv_annotations(path: PathLike, class_names: Optional[Sequence[str]] = None):
    """Flat CSV fixture importer.

    Columns: ``image_id,file_name,width,height,class_name,x_min,y_min,x_max,y_max``;
    rows without a class name declare images with no boxes.
    """
    path = Path(path)
    names = list(class_names) if class_names else []
    images: dict[str, tuple] = {}
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                image_id = row["image_id"]
                images.setdefault(image_id, (row["file_name"], int(row["width"]), int(row["height"])))
                if row.get("class_name"):
                    coords = [float(row[k]) for k in ("x_min", "y_min", "x_max", "y_max")]
                    rows.append((lineno, image_id, row["class_name"], coords))
                    if not class_names and row["class_name"] not in names:
                        names.append(row["class_name"])
            except (KeyError, ValueError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed row ({exc})") from None
    if not class_names:
        names.sort()
    index = {n: i for i, n in enumerate(names)}
    boxes: dict[str, list[BBox]] = {k: [] for k in images}
    for lineno, image_id, cname, (x1, y1, x2, y2) in rows:
        if cname not in index:
            raise FormatError(f"{path}:{lineno}: unknown class {cname!r}")
        if x2 < x1 or y2 < y1:
            raise FormatError(f"{path}:{lineno}: inverted box corners")
        boxes[image_id].append(BBox(x1, y1, x2, y2, index[cname], 1.0))
    entries = tuple(ManifestEntry(k, fn, w, h, _summary(boxes[k])) for k, (fn, w, h) in images.items())
    manifest = DatasetManifest(entries, tuple(names), root=str(path.parent))
    return manifest, {k: GroundTruth(k, tuple(v)) for k, v in boxes.items()}


# ---------------------------------------------------------------------------
# predictions


def parse_predictions(
    data,
    categories: Optional[Mapping] = None,
    frames: Optional[Mapping[str, ImageMeta]] = None,
    bbox_format: Optional[str] = None,
) -> dict[str, DetectionSet]:
    """Group COCO result records into one :class:`DetectionSet` per image.

    ``categories`` maps original category ids to dense class ids; without it
    ``category_id`` must already be a dense, non-negative class id.  Records
    with the ``source_id`` / ``scale_tag`` extensions keep them.
    """
    fmt = _bbox_format(data, bbox_format)
    file_frames: dict[str, ImageMeta] = {}
    sources: dict[str, str] = {}
    if isinstance(data, Mapping):
        schema = data.get("schema", SCHEMA)
        if schema != SCHEMA:
            raise FormatError(f"unsupported prediction schema {schema!r}")
        for rec in data.get("images", []):
            meta = ImageMeta(
                str(rec["image_id"]), int(rec["width"]), int(rec["height"]), rec.get("scale_tag")
            )
            file_frames[meta.image_id] = meta
            if rec.get("source_id"):
                sources[meta.image_id] = str(rec["source_id"])
        records = data.get("predictions", [])
    else:
        records = data
    if not isinstance(records, list):
        raise FormatError("predictions must be a list of records")

    grouped: dict[str, list[BBox]] = {}
    scales: dict[str, Optional[float]] = {}
    problems = []
    for i, rec in enumerate(records):
        try:
            image_id = str(rec["image_id"])
            cat = rec["category_id"]
            score = float(rec["score"])
            x, y, w, h = _decode_bbox(rec["bbox"], fmt)
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"predictions[{i}]: malformed record {rec!r} ({exc})")
            continue
        if not 0.0 <= score <= 1.0:
            problems.append(f"predictions[{i}]: score {score} outside [0, 1]")
            continue
        if categories is not None:
            if cat not in categories:
                problems.append(f"predictions[{i}]: unknown category {cat!r}")
                continue
            class_id = categories[cat]
        else:
            if not isinstance(cat, int) or cat < 0:
                problems.append(f"predictions[{i}]: unknown category {cat!r}")
                continue
            class_id = cat
        if w < 0 or h < 0:
            problems.append(f"predictions[{i}]: negative width/height in bbox {rec['bbox']}")
            continue
        grouped.setdefault(image_id, []).append(BBox(x, y, x + w, y + h, class_id, score))
        sources.setdefault(image_id, str(rec.get("source_id", "")))
        scales.setdefault(image_id, rec.get("scale_tag"))
    if problems:
        raise FormatError(f"{len(problems)} rejected prediction record(s)", problems)

    out = {}
    for image_id in sorted(set(grouped) | set(file_frames)):
        frame = file_frames.get(image_id)
        if frame is None and frames is not None and image_id in frames:
            frame = frames[image_id]
            if scales.get(image_id) is not None:
                frame = ImageMeta(frame.image_id, frame.width, frame.height, float(scales[image_id]))
        out[image_id] = DetectionSet(image_id, sources.get(image_id, ""), frame, tuple(grouped.get(image_id, ())))
    return out


def load_predictions(
    path: PathLike,
    categories: Optional[Mapping] = None,
    frames: Optional[Mapping[str, ImageMeta]] = None,
    bbox_format: Optional[str] = None,
) -> dict[str, DetectionSet]:
    return parse_predictions(_read_json(path), categories, frames, bbox_format)


def predictions_to_dict(sets: Iterable[DetectionSet], category_ids: Optional[Sequence] = None) -> dict:
    images, records = [], []
    for s in sorted(sets, key=lambda s: s.image_id):
        if s.frame is not None:
            img = {"image_id": s.image_id, "width": s.frame.width, "height": s.frame.height}
            if s.frame.scale_tag is not None:
                img["scale_tag"] = s.frame.scale_tag
            if s.source_id:
                img["source_id"] = s.source_id
            images.append(img)
        for b in s.boxes:
            rec = {
                "image_id": s.image_id,
                "category_id": category_ids[b.class_id] if category_ids is not None else b.class_id,
                "bbox": b.to_xywh(),
                "score": b.confidence,
            }
            if s.source_id:
                rec["source_id"] = s.source_id
            if s.frame is not None and s.frame.scale_tag is not None:
                rec["scale_tag"] = s.frame.scale_tag
            records.append(rec)
    return {"schema": SCHEMA, "images": images, "predictions": records}


def save_predictions(sets: Iterable[DetectionSet], path: PathLike, category_ids: Optional[Sequence] = None) -> None:
    if isinstance(sets, Mapping):
        sets = sets.values()
    write_atomic(path, dump_json(predictions_to_dict(sets, category_ids)))


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    """Validation size per class, as a count or (when ``per_class`` is None) a ratio."""

    per_class: Optional[int] = 200
    ratio: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.per_class is not None and self.per_class < 0:
            raise ValueError("per_class must be >= 0")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("ratio must lie in [0, 1]")

    def count_for(self, population: int) -> int:
        if self.per_class is not None:
            return self.per_class
        return int(round(population * self.ratio))


def stratum(entry: ManifestEntry) -> Optional[int]:
    """Majority class of an image (lowest class id on ties); None without boxes."""
    counts = entry.label_counts()
    if not counts:
        return None
    return min(counts, key=lambda c: (-counts[c], c))


def split(manifest: DatasetManifest, spec: SplitSpec = SplitSpec()) -> tuple[list[str], list[str]]:
    """Stratified train/validation split with exactly the requested count per class.

    Images are stratified by majority class; images without boxes always go
    to the training side.  Returned id lists keep manifest order.
    """
    strata: dict[int, list[str]] = {}
    for e in manifest.entries:
        s = stratum(e)
        if s is not None:
            strata.setdefault(s, []).append(e.image_id)
    val = set()
    for cls in sorted(strata):
        ids = sorted(strata[cls])
        k = spec.count_for(len(ids))
        if k > len(ids):
            name = manifest.class_names[cls] if cls < len(manifest.class_names) else str(cls)
            raise ValueError(f"class {name!r} has {len(ids)} images, cannot hold out {k}")
        perm = make_rng(spec.seed, "split", cls).permutation(len(ids))
        val.update(ids[i] for i in perm[:k])
    train = [e.image_id for e in manifest.entries if e.image_id not in val]
    valid = [e.image_id for e in manifest.entries if e.image_id in val]
    return train, valid


# ---------------------------------------------------------------------------
# image codec


def read_image(path: PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_image(path: PathLike, img: np.ndarray) -> None:
    """Encode by extension (PNG lossless, JPEG at quality 95) and write atomically."""
    path = Path(path)
    fmt = {".png": "PNG", ".jpg": "JPEG", ".jpeg": "JPEG"}.get(path.suffix.lower())
    if fmt is None:
        raise ValueError(f"unsupported image extension {path.suffix!r}")
    buf = io.BytesIO()
    kwargs = {"quality": 95} if fmt == "JPEG" else {}
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(buf, format=fmt, **kwargs)
    write_atomic(path, buf.getvalue())
