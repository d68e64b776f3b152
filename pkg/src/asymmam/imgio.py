"""Dataset manifests, PNG I/O, preprocessing to canonical geometry, and augmentation.

Images flow through the package as 2-D float arrays in [0, 1]. Preprocessing
crops the breast region (Otsu threshold + largest connected component),
resizes to the canonical size, min-max rescales, and mirrors left-laterality
images so the chest wall always sits on the same border.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np
from PIL import Image
from skimage.filters import threshold_otsu
from skimage.measure import label as cc_label

from .errors import ConfigError, DataError, DegenerateImageError

VIEWS = ("CC", "MLO")
LATERALITIES = ("right", "left")

DEFAULT_HEIGHT = 1024
DEFAULT_WIDTH = 512

MANIFEST_REQUIRED = ("pair_id", "right_path", "left_path", "view", "y_r", "y_l")
MANIFEST_OPTIONAL = ("y_asy", "mask_r_path", "mask_l_path", "real_r_path", "real_l_path")


@dataclass
class GrayImage:
    """Single-channel image in [0, 1] with laterality and projection tags."""

    pixels: np.ndarray
    laterality: str = "right"
    view: str = "CC"

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2 or self.pixels.size == 0:
            raise DataError("GrayImage expects a nonempty 2-D array")
        if not np.all(np.isfinite(self.pixels)):
            raise DataError("GrayImage pixels must be finite")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise DataError("GrayImage pixels must lie in [0, 1]")
        if self.laterality not in LATERALITIES:
            raise DataError(f"unknown laterality {self.laterality!r}")
        if self.view not in VIEWS:
            raise DataError(f"unknown view {self.view!r}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class BilateralPair:
    """Right/left views of one projection with per-side and pair-level labels.

    ``mask_*`` are optional {0,1} lesion masks. ``real_*`` optionally hold the
    pre-insertion (clean) canonical images of synthetic pairs; they are used
    for synthesis-supervised reconstruction and for reconstruction scoring.
    """

    right: GrayImage
    left: GrayImage
    y_r: int
    y_l: int
    y_asy: int
    mask_r: np.ndarray | None = None
    mask_l: np.ndarray | None = None
    pair_id: str = ""
    real_right: np.ndarray | None = None
    real_left: np.ndarray | None = None

    def __post_init__(self):
        for name in ("y_r", "y_l", "y_asy"):
            v = getattr(self, name)
            if v not in (0, 1):
                raise DataError(f"{name} must be 0 or 1, got {v!r}")
        expected_asy = 1 - (1 - self.y_r) * (1 - self.y_l)
        if self.y_asy != expected_asy:
            raise DataError(
                f"pair {self.pair_id!r}: y_asy={self.y_asy} inconsistent with "
                f"per-side labels (y_r={self.y_r}, y_l={self.y_l})"
            )
        if self.right.pixels.shape != self.left.pixels.shape:
            raise DataError("right/left images must share canonical dimensions")
        if self.right.view != self.left.view:
            raise DataError("right/left images must share the view label")
        for name in ("mask_r", "mask_l"):
            m = getattr(self, name)
            if m is None:
                continue
            m = np.asarray(m)
            if m.shape != self.right.pixels.shape:
                raise DataError(f"{name} shape {m.shape} does not match images")
            if not np.isin(m, (0, 1)).all():
                raise DataError(f"{name} must be {{0,1}}-valued")
            setattr(self, name, m.astype(np.uint8))

    @property
    def shape(self):
        return self.right.pixels.shape

    @property
    def has_any_mask(self) -> bool:
        return any(m is not None and m.sum() > 0 for m in (self.mask_r, self.mask_l))


@dataclass
class ManifestRow:
    pair_id: str
    right_path: str
    left_path: str
    view: str
    y_r: int
    y_l: int
    y_asy: int
    mask_r_path: str | None = None
    mask_l_path: str | None = None
    real_r_path: str | None = None
    real_l_path: str | None = None

    @property
    def has_masks(self) -> bool:
        return self.mask_r_path is not None or self.mask_l_path is not None


@dataclass
class Manifest:
    rows: list[ManifestRow]
    split: str
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.rows)


def _parse_binary(value: str, col: str, line_no: int):
    v = value.strip()
    if v not in ("0", "1"):
        raise DataError(f"row {line_no}: column {col!r} must be 0 or 1, got {value!r}")
    return int(v)


def load_manifest(path, split: str | None = None) -> Manifest:
    """Read a manifest CSV; y_asy is derived from per-side labels when absent."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    rows = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty manifest, header row required")
        missing = [c for c in MANIFEST_REQUIRED if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing required columns {missing}")
        unknown = [
            c for c in reader.fieldnames
            if c not in MANIFEST_REQUIRED + MANIFEST_OPTIONAL
        ]
        if unknown:
            raise DataError(f"{path}: unknown columns {unknown}")
        for line_no, rec in enumerate(reader, start=2):
            if any(rec.get(c) in (None, "") for c in MANIFEST_REQUIRED):
                raise DataError(f"row {line_no}: missing required field")
            pair_id = rec["pair_id"].strip()
            if pair_id in seen:
                raise DataError(f"row {line_no}: duplicate pair_id {pair_id!r}")
            seen.add(pair_id)
            view = rec["view"].strip()
            if view not in VIEWS:
                raise DataError(f"row {line_no}: unknown view {view!r}")
            y_r = _parse_binary(rec["y_r"], "y_r", line_no)
            y_l = _parse_binary(rec["y_l"], "y_l", line_no)
            derived = 1 - (1 - y_r) * (1 - y_l)
            if rec.get("y_asy") not in (None, ""):
                y_asy = _parse_binary(rec["y_asy"], "y_asy", line_no)
                if y_asy != derived:
                    raise DataError(
                        f"row {line_no}: y_asy={y_asy} inconsistent with "
                        f"y_r={y_r}, y_l={y_l}"
                    )
            else:
                y_asy = derived
            opt = {
                c: (rec.get(c).strip() if rec.get(c) not in (None, "") else None)
                for c in ("mask_r_path", "mask_l_path", "real_r_path", "real_l_path")
            }
            row = ManifestRow(pair_id, rec["right_path"].strip(), rec["left_path"].strip(),
                              view, y_r, y_l, y_asy, **opt)
            for col in ("right_path", "left_path", *opt):
                rel = getattr(row, col)
                if rel is not None and not (root / rel).exists():
                    raise DataError(f"row {line_no}: referenced file missing: {rel}")
            rows.append(row)
    if split is None:
        split = path.stem
    return Manifest(rows=rows, split=split, root=root)


def write_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(MANIFEST_REQUIRED) + list(MANIFEST_OPTIONAL)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for r in manifest.rows:
            writer.writerow([
                r.pair_id, r.right_path, r.left_path, r.view, r.y_r, r.y_l, r.y_asy,
                r.mask_r_path or "", r.mask_l_path or "",
                r.real_r_path or "", r.real_l_path or "",
            ])


# ---------------------------------------------------------------------------
# PNG I/O (8- or 16-bit single channel)
# ---------------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    """Load a grayscale PNG as float64 in [0, 1] (scaled by the format maximum)."""
    arr = np.asarray(Image.open(path))
    if arr.ndim == 3:
        arr = arr[..., 0]
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64) / 65535.0


def read_mask(path) -> np.ndarray:
    """Load a {0, max} mask PNG as a {0,1} uint8 array."""
    arr = np.asarray(Image.open(path))
    if arr.ndim == 3:
        arr = arr[..., 0]
    return (arr > 0).astype(np.uint8)


def write_image(path, pixels: np.ndarray, bit_depth: int = 16) -> None:
    pixels = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    if bit_depth == 16:
        arr = np.round(pixels * 65535.0).astype(np.uint16)
    elif bit_depth == 8:
        arr = np.round(pixels * 255.0).astype(np.uint8)
    else:
        raise ConfigError(f"bit_depth must be 8 or 16, got {bit_depth}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def write_mask(path, mask: np.ndarray) -> None:
    arr = (np.asarray(mask) > 0).astype(np.uint8) * 255
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

@dataclass
class PreprocessGeometry:
    """Crop box, rescale bounds, and mirroring applied by preprocess.

    Stored so masks and companion images (pre-insertion references) can be
    resampled through exactly the same transform as the main image.
    """

    crop: tuple[int, int, int, int]  # r0, r1, c0, c1 (end-exclusive)
    out_hw: tuple[int, int]
    lo: float
    hi: float
    mirrored: bool


def _foreground_bbox(arr: np.ndarray):
    thr = threshold_otsu(arr)
    fg = arr > thr
    if not fg.any():
        raise DegenerateImageError("no foreground above the Otsu threshold")
    labels = cc_label(fg, connectivity=2)
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    biggest = counts.argmax()
    rows, cols = np.nonzero(labels == biggest)
    return int(rows.min()), int(rows.max()) + 1, int(cols.min()), int(cols.max()) + 1


def preprocess_with_geometry(raw: np.ndarray, target_h: int, target_w: int,
                             laterality: str = "right", view: str = "CC"):
    """Crop the breast region, resize, min-max rescale, mirror left images.

    Returns the canonical GrayImage together with the geometry record needed
    to push masks or companion images through the same transform.
    """
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise DataError("preprocess expects a nonempty 2-D array")
    if not np.all(np.isfinite(arr)):
        raise DataError("preprocess input must be finite")
    if arr.min() < 0:
        raise DataError("preprocess input must be nonnegative")
    if arr.max() == arr.min():
        raise DegenerateImageError("constant image: no foreground/background contrast")

    r0, r1, c0, c1 = _foreground_bbox(arr)
    if r1 - r0 < 2 or c1 - c0 < 2:
        raise DegenerateImageError("foreground region too small to crop")
    crop = arr[r0:r1, c0:c1]
    if crop.shape == (target_h, target_w):
        resized = crop
    else:
        resized = cv2.resize(crop, (target_w, target_h), interpolation=cv2.INTER_LINEAR)
    lo, hi = float(resized.min()), float(resized.max())
    if hi - lo <= 0:
        raise DegenerateImageError("cropped region is constant")
    out = np.clip((resized - lo) / (hi - lo), 0.0, 1.0)
    mirrored = laterality == "left"
    if mirrored:
        out = out[:, ::-1]
    geom = PreprocessGeometry((r0, r1, c0, c1), (target_h, target_w), lo, hi, mirrored)
    return GrayImage(np.ascontiguousarray(out), laterality=laterality, view=view), geom


def preprocess(raw: np.ndarray, target_h: int = DEFAULT_HEIGHT,
               target_w: int = DEFAULT_WIDTH, laterality: str = "right",
               view: str = "CC") -> GrayImage:
    img, _ = preprocess_with_geometry(raw, target_h, target_w, laterality, view)
    return img


def apply_geometry_mask(mask: np.ndarray, geom: PreprocessGeometry) -> np.ndarray:
    """Resample a {0,1} mask through a recorded preprocess geometry (nearest)."""
    r0, r1, c0, c1 = geom.crop
    crop = np.asarray(mask, dtype=np.uint8)[r0:r1, c0:c1]
    h, w = geom.out_hw
    if crop.shape != (h, w):
        crop = cv2.resize(crop, (w, h), interpolation=cv2.INTER_NEAREST)
    if geom.mirrored:
        crop = crop[:, ::-1]
    return np.ascontiguousarray(crop)


def apply_geometry_intensity(img: np.ndarray, geom: PreprocessGeometry) -> np.ndarray:
    """Resample an intensity image through a recorded geometry (bilinear).

    Uses the recorded lo/hi so the result stays on the same intensity scale as
    the image the geometry was computed from.
    """
    r0, r1, c0, c1 = geom.crop
    crop = np.asarray(img, dtype=np.float64)[r0:r1, c0:c1]
    h, w = geom.out_hw
    if crop.shape != (h, w):
        crop = cv2.resize(crop, (w, h), interpolation=cv2.INTER_LINEAR)
    out = np.clip((crop - geom.lo) / (geom.hi - geom.lo), 0.0, 1.0)
    if geom.mirrored:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# Augmentation (random zoom + random crop)
# ---------------------------------------------------------------------------

def _check_augment_params(zoom_range, crop_fraction):
    zlo, zhi = float(zoom_range[0]), float(zoom_range[1])
    if not (0.8 <= zlo <= zhi <= 1.2):
        raise ConfigError(f"zoom_range must lie within [0.8, 1.2], got {zoom_range}")
    if not (0.8 < crop_fraction <= 1.0):
        raise ConfigError(f"crop_fraction must lie in (0.8, 1.0], got {crop_fraction}")
    return zlo, zhi, float(crop_fraction)


def _sample_window(rng, h, w, zlo, zhi, crop_fraction):
    z = rng.uniform(zlo, zhi)
    wh = int(np.clip(round(h * crop_fraction / z), 8, h))
    ww = int(np.clip(round(w * crop_fraction / z), 8, w))
    top = int(rng.integers(0, h - wh + 1))
    lft = int(rng.integers(0, w - ww + 1))
    return top, lft, wh, ww


def _apply_window(pixels, top, lft, wh, ww, order):
    h, w = pixels.shape
    if (wh, ww) == (h, w):
        return pixels.copy()
    win = pixels[top:top + wh, lft:lft + ww]
    interp = cv2.INTER_LINEAR if order == 1 else cv2.INTER_NEAREST
    out = cv2.resize(win, (w, h), interpolation=interp)
    if order == 1:
        out = np.clip(out, 0.0, 1.0)
    return out


def augment(img: GrayImage, rng_seed: int, zoom_range=(0.9, 1.1),
            crop_fraction: float = 0.9) -> GrayImage:
    """Random zoom + random crop, resized back to canonical size.

    Deterministic per seed. zoom_range=[1,1] with crop_fraction=1.0 is the
    exact identity. A zoom-out window larger than the frame is capped at the
    image bounds (no padding).
    """
    zlo, zhi, cf = _check_augment_params(zoom_range, crop_fraction)
    rng = np.random.default_rng(rng_seed)
    h, w = img.pixels.shape
    top, lft, wh, ww = _sample_window(rng, h, w, zlo, zhi, cf)
    out = _apply_window(img.pixels, top, lft, wh, ww, order=1)
    return GrayImage(out, laterality=img.laterality, view=img.view)


def augment_pair(pair: BilateralPair, rng_seed: int, zoom_range=(0.9, 1.1),
                 crop_fraction: float = 0.9) -> BilateralPair:
    """Apply one shared zoom/crop transform to both sides and both masks."""
    zlo, zhi, cf = _check_augment_params(zoom_range, crop_fraction)
    rng = np.random.default_rng(rng_seed)
    h, w = pair.shape
    top, lft, wh, ww = _sample_window(rng, h, w, zlo, zhi, cf)

    def im(g):
        return GrayImage(_apply_window(g.pixels, top, lft, wh, ww, order=1),
                         laterality=g.laterality, view=g.view)

    def mk(m):
        return None if m is None else _apply_window(m, top, lft, wh, ww, order=0)

    def ref(m):
        return None if m is None else _apply_window(m, top, lft, wh, ww, order=1)

    return replace(pair,
                   right=im(pair.right), left=im(pair.left),
                   mask_r=mk(pair.mask_r), mask_l=mk(pair.mask_l),
                   real_right=ref(pair.real_right), real_left=ref(pair.real_left))


# ---------------------------------------------------------------------------
# Pair loading
# ---------------------------------------------------------------------------

def load_pair(row: ManifestRow, root, target_h: int, target_w: int,
              keep_real: bool = True) -> BilateralPair:
    """Load, preprocess, and assemble one bilateral pair from a manifest row.

    Masks and pre-insertion reference images are pushed through the same
    geometry as their side's main image so everything stays aligned.
    """
    root = Path(root)

    def side(img_path, mask_path, real_path, laterality):
        raw = read_image(root / img_path)
        img, geom = preprocess_with_geometry(raw, target_h, target_w,
                                             laterality=laterality, view=row.view)
        mask = None
        if mask_path is not None:
            mask = apply_geometry_mask(read_mask(root / mask_path), geom)
        real = None
        if keep_real and real_path is not None:
            real = apply_geometry_intensity(read_image(root / real_path), geom)
        return img, mask, real

    right, mask_r, real_r = side(row.right_path, row.mask_r_path, row.real_r_path, "right")
    left, mask_l, real_l = side(row.left_path, row.mask_l_path, row.real_l_path, "left")
    return BilateralPair(right=right, left=left, y_r=row.y_r, y_l=row.y_l,
                         y_asy=row.y_asy, mask_r=mask_r, mask_l=mask_l,
                         pair_id=row.pair_id, real_right=real_r, real_left=real_l)
