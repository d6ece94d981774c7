"""Photometric and geometric augmentations over 8-bit RGB rasters.

Rasters are ``(height, width, 3)`` uint8 numpy arrays.  Defaults follow the
settings used for the parasitic-egg detectors: CLAHE clip limit 8, mixed-space
enhancement with a 3x3 Laplacian and a 5x5 mask filter, Gaussian noise
N(0, 0.2) on unit intensities, 500 salt-and-pepper pixels, fog with airlight
brightness 0.4 and concentration 0.03, and a 6x6 box blur.

Stochastic ops take a ``seed`` and an optional ``image_id``; the pair fully
determines the output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np
from PIL import Image

from ._backend import kernels
from .geometry import BBox
from .rng import make_rng

PHOTOMETRIC = ("clahe", "mixed_space", "gaussian_noise", "salt_pepper", "fog", "blur")
GEOMETRIC = ("hflip", "vflip", "resize")
KINDS = PHOTOMETRIC + GEOMETRIC
STOCHASTIC = ("gaussian_noise", "salt_pepper", "fog")

DEFAULT_PARAMS: dict[str, dict[str, Any]] = {
    "clahe": {"cliplimit": 8.0, "tiles": (8, 8)},
    "mixed_space": {"kernelsize": 3, "filtersize": (5, 5)},
    "gaussian_noise": {"mean": 0.0, "std": 0.2},
    "salt_pepper": {"number": 500, "per_megapixel": False},
    "fog": {"brightness": 0.4, "concentration": 0.03, "depth": "noise"},
    "blur": {"kernelsize": (6, 6)},
    "hflip": {},
    "vflip": {},
    "resize": {"scale": None, "width": None, "height": None},
}

# BT.601 luma weights in thousandths; integer weights keep gray pixels exact.
_LUMA = np.array([299, 587, 114], dtype=np.float64)


def as_raster(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) raster, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 samples, got {img.dtype}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError("empty raster")
    return img


def _round_u8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def _pair(value) -> tuple[int, int]:
    if isinstance(value, (int, np.integer)):
        return int(value), int(value)
    a, b = value
    return int(a), int(b)


def luminance(img: np.ndarray) -> np.ndarray:
    """BT.601 luma as float64 in [0, 255]."""
    return (img.astype(np.float64) @ _LUMA) / 1000.0


# ---------------------------------------------------------------------------
# biological augmentation


def clahe(img, cliplimit: float = 8.0, tiles=(8, 8)) -> np.ndarray:
    """Contrast limited adaptive histogram equalization of the luma channel.

    Each tile's histogram is clipped at ``cliplimit * tile_pixels / 256``
    counts with the excess spread uniformly over all bins, and the per-tile
    mappings are blended bilinearly between tile centers.  Chroma is kept by
    shifting all three channels by the luma change.  Images smaller than the
    tile grid are equalized as a single tile.
    """
    img = as_raster(img)
    if cliplimit < 1:
        raise ValueError("cliplimit must be >= 1")
    tiles_y, tiles_x = _pair(tiles)
    if tiles_y < 1 or tiles_x < 1:
        raise ValueError("tile grid must be at least 1x1")
    h, w = img.shape[:2]
    if h < tiles_y or w < tiles_x:
        tiles_y = tiles_x = 1

    y = luminance(img)
    lum = _round_u8(y)
    pad_y = (-h) % tiles_y
    pad_x = (-w) % tiles_x
    padded = np.pad(lum, ((0, pad_y), (0, pad_x)), mode="reflect") if pad_y or pad_x else lum
    tile_h = padded.shape[0] // tiles_y
    tile_w = padded.shape[1] // tiles_x
    clip = max(int(cliplimit * tile_h * tile_w / 256), 1)

    luts = kernels.clahe_luts(np.ascontiguousarray(padded), tiles_y, tiles_x, clip)
    new_lum = kernels.clahe_interp(np.ascontiguousarray(lum), luts, tile_h, tile_w)
    shift = new_lum.astype(np.float64) - y
    return _round_u8(img.astype(np.float64) + shift[..., None])


def _box_sums(channel: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Window sums with edge-replicate padding; even windows anchor at k // 2."""
    top, left = kh // 2, kw // 2
    padded = np.pad(channel, ((top, kh - 1 - top), (left, kw - 1 - left)), mode="edge")
    return kernels.box_sum(np.ascontiguousarray(padded, dtype=np.int64), kh, kw)


def mixed_space_enhance(img, kernelsize: int = 3, filtersize=(5, 5)) -> np.ndarray:
    """Laplacian high-boost gated by a local-mean mask.

    ``out = clamp(I + m * L)`` where ``L = 8 / (k*k - 1) * (k*k*I - sum_k(I))``
    is the k x k discrete Laplacian (the 8-neighbour kernel for k = 3) and
    ``m`` is the ``filtersize`` box-filtered intensity scaled to [0, 1], so
    bright structures are sharpened more than the dark background.
    """
    img = as_raster(img)
    k = int(kernelsize)
    if k < 1 or k % 2 == 0:
        raise ValueError("kernelsize must be a positive odd integer")
    fh, fw = _pair(filtersize)
    if fh < 1 or fw < 1:
        raise ValueError("filtersize dimensions must be >= 1")
    if k == 1:
        return img.copy()

    out = np.empty_like(img)
    gain = 8.0 / (k * k - 1)
    for c in range(3):
        chan = img[..., c].astype(np.int64)
        lap = (k * k * chan - _box_sums(chan, k, k)) * gain
        mask = _box_sums(chan, fh, fw) / (fh * fw * 255.0)
        out[..., c] = _round_u8(chan + mask * lap)
    return out


# ---------------------------------------------------------------------------
# robust augmentation


def gaussian_noise(img, mean: float = 0.0, std: float = 0.2, seed: int = None, image_id: str = "") -> np.ndarray:
    img = as_raster(img)
    if std < 0:
        raise ValueError("std must be >= 0")
    if std == 0 and mean == 0:
        return img.copy()
    rng = make_rng(seed, "gaussian_noise", image_id)
    noise = rng.normal(mean, std, size=img.shape)
    return _round_u8(np.clip(img / 255.0 + noise, 0.0, 1.0) * 255.0)


def salt_pepper(
    img, number: int = 500, seed: int = None, image_id: str = "", per_megapixel: bool = False
) -> np.ndarray:
    """Set exactly ``number`` distinct pixels to pure black or white.

    With ``per_megapixel`` the count is read as a density per 10^6 pixels.
    """
    img = as_raster(img)
    h, w = img.shape[:2]
    if number < 0:
        raise ValueError("number must be >= 0")
    if per_megapixel:
        number = int(round(number * h * w / 1e6))
    if number > h * w:
        raise ValueError(f"cannot place {number} noise pixels in a {w}x{h} image")
    out = img.copy()
    if number == 0:
        return out
    rng = make_rng(seed, "salt_pepper", image_id)
    flat = rng.choice(h * w, size=number, replace=False)
    values = rng.integers(0, 2, size=number).astype(np.uint8) * 255
    out.reshape(-1, 3)[flat] = values[:, None]
    return out


def _value_noise(h: int, w: int, rng: np.random.Generator, octaves: int = 4) -> np.ndarray:
    """Multi-octave smooth value noise in [0, 1] spanning the whole image."""
    ys = np.linspace(0.0, 1.0, h) if h > 1 else np.zeros(1)
    xs = np.linspace(0.0, 1.0, w) if w > 1 else np.zeros(1)
    total = np.zeros((h, w))
    norm = 0.0
    for o in range(octaves):
        cells = 2 ** (o + 1)
        lattice = rng.random((cells + 1, cells + 1))
        gy, gx = ys * cells, xs * cells
        iy = np.minimum(gy.astype(np.intp), cells - 1)
        ix = np.minimum(gx.astype(np.intp), cells - 1)
        fy, fx = gy - iy, gx - ix
        sy = (fy * fy * (3 - 2 * fy))[:, None]
        sx = (fx * fx * (3 - 2 * fx))[None, :]
        iy, ix = iy[:, None], ix[None, :]
        top = lattice[iy, ix] * (1 - sx) + lattice[iy, ix + 1] * sx
        bottom = lattice[iy + 1, ix] * (1 - sx) + lattice[iy + 1, ix + 1] * sx
        amp = 0.5 ** o
        total += amp * (top * (1 - sy) + bottom * sy)
        norm += amp
    return total / norm


def fog_depth(h: int, w: int, seed: int = None, image_id: str = "", mode: str = "noise") -> np.ndarray:
    """Scene depth used by :func:`fog`, in units of ``sqrt(max(h, w))``.

    Depth ranges over [0.25, 1] of that scale so fully fogged output is
    reached everywhere as the concentration grows.
    """
    size = np.sqrt(max(h, w))
    if mode == "constant":
        return np.full((h, w), size)
    if mode != "noise":
        raise ValueError(f"unknown fog depth mode {mode!r}")
    noise = _value_noise(h, w, make_rng(seed, "fog", image_id))
    return size * (0.25 + 0.75 * noise)


def fog(
    img,
    brightness: float = 0.4,
    concentration: float = 0.03,
    seed: int = None,
    image_id: str = "",
    depth: str = "noise",
) -> np.ndarray:
    """Atmospheric scattering: ``out = I * t + A * (1 - t)``, ``t = exp(-concentration * d)``."""
    img = as_raster(img)
    if not 0.0 <= brightness <= 1.0:
        raise ValueError("brightness must lie in [0, 1]")
    if concentration <= 0:
        raise ValueError("concentration must be > 0")
    h, w = img.shape[:2]
    airlight = brightness * 255.0
    t = np.exp(-concentration * fog_depth(h, w, seed, image_id, depth))[..., None]
    return _round_u8(img * t + airlight * (1.0 - t))


def blur(img, kernelsize=(6, 6)) -> np.ndarray:
    """Normalized box filter, edge-replicate padding, window anchored at ``k // 2``."""
    img = as_raster(img)
    kh, kw = _pair(kernelsize)
    if kh < 1 or kw < 1:
        raise ValueError("kernel dimensions must be >= 1")
    if kh == kw == 1:
        return img.copy()
    area = kh * kw
    out = np.empty_like(img)
    for c in range(3):
        sums = _box_sums(img[..., c], kh, kw)
        # integer round-half-up of sums / area
        out[..., c] = (2 * sums + area) // (2 * area)
    return out


# ---------------------------------------------------------------------------
# geometric ops


def hflip(img) -> np.ndarray:
    return as_raster(img)[:, ::-1].copy()


def vflip(img) -> np.ndarray:
    return as_raster(img)[::-1].copy()


def resize(img, scale: Optional[float] = None, width: Optional[int] = None, height: Optional[int] = None) -> np.ndarray:
    img = as_raster(img)
    h, w = img.shape[:2]
    new_w, new_h = _target_size(w, h, scale, width, height)
    if (new_w, new_h) == (w, h):
        return img.copy()
    return np.asarray(Image.fromarray(img).resize((new_w, new_h), Image.BILINEAR))


def _target_size(w, h, scale, width, height):
    if scale is not None:
        if scale <= 0:
            raise ValueError("resize scale must be positive")
        return max(1, int(round(w * scale))), max(1, int(round(h * scale)))
    if width is None or height is None:
        raise ValueError("resize needs either scale or both width and height")
    if width < 1 or height < 1:
        raise ValueError("resize target must be at least 1x1")
    return int(width), int(height)


# ---------------------------------------------------------------------------
# declarative pipeline


@dataclass(frozen=True)
class AugmentSpec:
    """One augmentation op with its parameters; unspecified params take the defaults."""

    kind: str
    params: dict = field(default_factory=dict)
    seed: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.kind])
        if unknown:
            raise ValueError(f"{self.kind}: unknown parameters {sorted(unknown)}")
        p = self.resolved()
        checks = {
            "clahe": lambda: p["cliplimit"] >= 1 and min(_pair(p["tiles"])) >= 1,
            "mixed_space": lambda: int(p["kernelsize"]) % 2 == 1 and min(_pair(p["filtersize"])) >= 1,
            "gaussian_noise": lambda: p["std"] >= 0,
            "salt_pepper": lambda: p["number"] >= 0,
            "fog": lambda: 0 <= p["brightness"] <= 1 and p["concentration"] > 0,
            "blur": lambda: min(_pair(p["kernelsize"])) >= 1,
        }
        if self.kind in checks and not checks[self.kind]():
            raise ValueError(f"{self.kind}: parameters out of range: {p}")

    def resolved(self) -> dict:
        return {**DEFAULT_PARAMS[self.kind], **self.params}

    @property
    def photometric(self) -> bool:
        return self.kind in PHOTOMETRIC

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"kind": self.kind}
        if self.params:
            d["params"] = {k: list(v) if isinstance(v, tuple) else v for k, v in self.params.items()}
        if self.seed is not None:
            d["seed"] = self.seed
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentSpec":
        if "kind" not in d:
            raise ValueError(f"augmentation record without 'kind': {d}")
        return cls(d["kind"], dict(d.get("params", {})), d.get("seed"))


def apply_op(img, spec: AugmentSpec, seed: Optional[int] = None, image_id: str = "") -> np.ndarray:
    """Apply one op to a raster; ``spec.seed`` wins over ``seed`` when set."""
    p = spec.resolved()
    op_seed = spec.seed if spec.seed is not None else seed
    if spec.kind in STOCHASTIC and op_seed is None:
        raise ValueError(f"{spec.kind} needs a seed")
    if spec.kind == "clahe":
        return clahe(img, p["cliplimit"], p["tiles"])
    if spec.kind == "mixed_space":
        return mixed_space_enhance(img, p["kernelsize"], p["filtersize"])
    if spec.kind == "gaussian_noise":
        return gaussian_noise(img, p["mean"], p["std"], op_seed, image_id)
    if spec.kind == "salt_pepper":
        return salt_pepper(img, p["number"], op_seed, image_id, p["per_megapixel"])
    if spec.kind == "fog":
        return fog(img, p["brightness"], p["concentration"], op_seed, image_id, p["depth"])
    if spec.kind == "blur":
        return blur(img, p["kernelsize"])
    if spec.kind == "hflip":
        return hflip(img)
    if spec.kind == "vflip":
        return vflip(img)
    return resize(img, p["scale"], p["width"], p["height"])


def transform_boxes(boxes: Sequence[BBox], spec: AugmentSpec, width: int, height: int) -> list[BBox]:
    """Boxes after ``spec`` is applied to a ``width x height`` image."""
    if spec.photometric:
        return list(boxes)
    if spec.kind == "hflip":
        return [BBox(width - b.x_max, b.y_min, width - b.x_min, b.y_max, b.class_id, b.confidence) for b in boxes]
    if spec.kind == "vflip":
        return [BBox(b.x_min, height - b.y_max, b.x_max, height - b.y_min, b.class_id, b.confidence) for b in boxes]
    p = spec.resolved()
    new_w, new_h = _target_size(width, height, p["scale"], p["width"], p["height"])
    sx, sy = new_w / width, new_h / height
    return [BBox(b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy, b.class_id, b.confidence) for b in boxes]


@dataclass(frozen=True)
class AugmentPipeline:
    specs: tuple[AugmentSpec, ...]

    def __post_init__(self):
        if not self.specs:
            raise ValueError("an augmentation pipeline needs at least one op")
        object.__setattr__(self, "specs", tuple(self.specs))

    def __iter__(self):
        return iter(self.specs)

    def __len__(self):
        return len(self.specs)

    def to_list(self) -> list[dict]:
        return [s.to_dict() for s in self.specs]

    @classmethod
    def from_list(cls, records) -> "AugmentPipeline":
        return cls(tuple(AugmentSpec.from_dict(r) for r in records))


def apply_pipeline(
    img, boxes: Sequence[BBox], pipeline, seed: Optional[int] = None, image_id: str = ""
) -> tuple[np.ndarray, list[BBox]]:
    """Run every op in order, carrying the boxes through geometric ops.

    Op ``i`` without its own seed draws from ``(seed, i)`` so repeated ops of
    the same kind get independent streams.
    """
    if not isinstance(pipeline, AugmentPipeline):
        pipeline = AugmentPipeline(tuple(pipeline))
    img = as_raster(img)
    boxes = list(boxes)
    h, w = img.shape[:2]
    for b in boxes:
        if b.x_min < 0 or b.y_min < 0 or b.x_max > w or b.y_max > h:
            raise ValueError(f"box {b.coords} lies outside the {w}x{h} image")
    for i, spec in enumerate(pipeline):
        op_seed = None if seed is None else (int(seed) * 1000003 + i) & ((1 << 64) - 1)
        h, w = img.shape[:2]
        boxes = transform_boxes(boxes, spec, w, h)
        img = apply_op(img, spec, op_seed, image_id)
    return img, boxes
