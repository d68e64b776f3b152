"""Synthetic asymmetry: tumor libraries, Gaussian alpha blending, and phantoms.

Symmetric pairs are turned into asymmetric ones by alpha-blending tumor
patches into one or both sides:

    fake = x * prod_k (1 - alpha_k) + sum_k t_k * alpha_k

where each alpha_k is a truncated 2-D Gaussian whose spread follows the patch
size (sigma = patch_size / 4). The phantom generator builds a fully synthetic
desk-scale dataset (half-ellipse breasts with smooth texture) on which every
lesion has exact ground truth.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter
from skimage.measure import label as cc_label

from . import imgio
from .errors import (ConfigError, DataError, EmptyTumorSetError, PlacementError,
                     ShapeError)


@dataclass
class TumorPatch:
    """Cropped lesion intensity patch in [0, 1]."""

    patch: np.ndarray
    source_id: str = ""
    bbox: tuple[int, int, int, int] | None = None  # original r0, c0, r1, c1

    def __post_init__(self):
        self.patch = np.asarray(self.patch, dtype=np.float64)
        ph, pw = self.patch.shape
        if ph < 4 or pw < 4:
            raise DataError(f"tumor patch too small: {self.patch.shape}")
        if self.patch.min() < 0 or self.patch.max() > 1:
            raise DataError("tumor patch values must lie in [0, 1]")

    @property
    def shape(self):
        return self.patch.shape


@dataclass
class TumorSet:
    patches: list[TumorPatch]
    origin_dataset: str = ""

    def __len__(self):
        return len(self.patches)


@dataclass
class TumorInsertion:
    """One placed tumor: patch index, center position, and full-image alpha map."""

    patch_index: int
    center: tuple[int, int]
    alpha: np.ndarray


@dataclass
class SynthesisRecord:
    """A synthesized asymmetric pair together with its pre-insertion original."""

    fake_pair: imgio.BilateralPair
    real_pair: imgio.BilateralPair
    inserted_mask_r: np.ndarray
    inserted_mask_l: np.ndarray
    seed: int = 0


def _patch_bbox(center, ph, pw, h, w):
    """Image-range and patch-range index windows for a patch centered at center."""
    r0 = center[0] - ph // 2
    c0 = center[1] - pw // 2
    ir0, ir1 = max(r0, 0), min(r0 + ph, h)
    ic0, ic1 = max(c0, 0), min(c0 + pw, w)
    return (ir0, ir1, ic0, ic1), (ir0 - r0, ir1 - r0, ic0 - c0, ic1 - c0)


def gaussian_alpha(image_h: int, image_w: int, center, patch_h: int, patch_w: int,
                   alpha_peak: float) -> np.ndarray:
    """Truncated 2-D Gaussian transparency map for one tumor insertion.

    sigma_r = patch_h / 4 and sigma_c = patch_w / 4, so the map decays to
    ~exp(-2) at the patch border; it is exactly zero outside the patch
    bounding box and exactly alpha_peak at the center.
    """
    r, c = int(center[0]), int(center[1])
    if not (0 <= r < image_h and 0 <= c < image_w):
        raise PlacementError(f"center {center} outside image {image_h}x{image_w}")
    if not (0.0 < alpha_peak <= 1.0):
        raise ConfigError(f"alpha_peak must lie in (0, 1], got {alpha_peak}")
    sr, sc = patch_h / 4.0, patch_w / 4.0
    (ir0, ir1, ic0, ic1), _ = _patch_bbox((r, c), patch_h, patch_w, image_h, image_w)
    rows = np.arange(ir0, ir1, dtype=np.float64) - r
    cols = np.arange(ic0, ic1, dtype=np.float64) - c
    g = np.exp(-(rows[:, None] ** 2 / (2.0 * sr ** 2) + cols[None, :] ** 2 / (2.0 * sc ** 2)))
    alpha = np.zeros((image_h, image_w), dtype=np.float64)
    alpha[ir0:ir1, ic0:ic1] = alpha_peak * g
    return alpha


def blend_tumors(x: imgio.GrayImage, insertions: list[TumorInsertion],
                 patches: TumorSet) -> imgio.GrayImage:
    """Alpha-blend up to three tumors into one image.

    Pixels where every alpha is zero are bit-identical to the input; the
    result is clamped to [0, 1] because overlapping alphas can push the sum
    above one.
    """
    n = len(insertions)
    if not (1 <= n <= 3):
        raise ConfigError(f"number of insertions must lie in [1, 3], got {n}")
    h, w = x.pixels.shape
    keep = np.ones((h, w), dtype=np.float64)
    add = np.zeros((h, w), dtype=np.float64)
    for ins in insertions:
        if not (0 <= ins.patch_index < len(patches.patches)):
            raise IndexError(f"tumor patch index {ins.patch_index} out of range "
                             f"(set has {len(patches.patches)})")
        patch = patches.patches[ins.patch_index].patch
        if ins.alpha.shape != (h, w):
            raise ShapeError(f"alpha shape {ins.alpha.shape} does not match image {(h, w)}")
        ph, pw = patch.shape
        (ir0, ir1, ic0, ic1), (pr0, pr1, pc0, pc1) = _patch_bbox(ins.center, ph, pw, h, w)
        placed = np.zeros((h, w), dtype=np.float64)
        placed[ir0:ir1, ic0:ic1] = patch[pr0:pr1, pc0:pc1]
        keep *= 1.0 - ins.alpha
        add += placed * ins.alpha
    fake = np.clip(x.pixels * keep + add, 0.0, 1.0)
    return imgio.GrayImage(fake, laterality=x.laterality, view=x.view)


def _fit_patch(patch: np.ndarray, h: int, w: int, max_frac: float) -> np.ndarray:
    """Downscale a patch so it occupies at most max_frac of each image dimension."""
    ph, pw = patch.shape
    scale = min(1.0, max_frac * h / ph, max_frac * w / pw)
    if scale >= 1.0:
        return patch
    nh, nw = max(4, int(round(ph * scale))), max(4, int(round(pw * scale)))
    return np.clip(cv2.resize(patch, (nw, nh), interpolation=cv2.INTER_LINEAR), 0.0, 1.0)


def _place_center(rng, fg_rows, fg_cols, ph, pw, h, w, max_attempts):
    """Draw foreground pixels until the patch bounding box fits inside the image."""
    if len(fg_rows) == 0:
        raise PlacementError("no foreground pixels available for insertion")
    for _ in range(max_attempts):
        k = int(rng.integers(0, len(fg_rows)))
        r, c = int(fg_rows[k]), int(fg_cols[k])
        r0, c0 = r - ph // 2, c - pw // 2
        if r0 >= 0 and c0 >= 0 and r0 + ph <= h and c0 + pw <= w:
            return r, c
    raise PlacementError(f"no valid placement found in {max_attempts} attempts")


SIDE_POLICIES = ("right", "left", "both", "random")


def synthesize_asymmetric(pair: imgio.BilateralPair, tumor_set: TumorSet,
                          rng_seed: int, side_policy: str = "random",
                          alpha_peak: float = 0.9, mask_threshold: float = 0.25,
                          fg_threshold: float = 0.05, max_attempts: int = 100,
                          max_patch_frac: float = 0.5) -> SynthesisRecord:
    """Insert 1-3 random tumors into a symmetric pair and update its labels.

    Deterministic per seed. Insertion centers are drawn uniformly over the
    breast foreground (pixels above fg_threshold) with the full patch box
    inside the image. The inserted masks are {alpha > mask_threshold}.
    """
    if pair.y_asy != 0:
        raise DataError("synthesis source pair must be symmetric (y_asy=0)")
    if len(tumor_set) == 0:
        raise EmptyTumorSetError("tumor set is empty")
    if side_policy not in SIDE_POLICIES:
        raise ConfigError(f"side_policy must be one of {SIDE_POLICIES}")
    rng = np.random.default_rng(rng_seed)
    h, w = pair.shape
    n = int(rng.integers(1, 4))
    policy = side_policy
    if policy == "random":
        policy = str(rng.choice(["right", "left", "both"]))

    images = {"right": pair.right, "left": pair.left}
    fg = {s: np.nonzero(images[s].pixels > fg_threshold) for s in images}
    per_side: dict[str, list[TumorInsertion]] = {"right": [], "left": []}
    working = TumorSet(patches=[], origin_dataset=tumor_set.origin_dataset)
    for _ in range(n):
        side = policy if policy != "both" else str(rng.choice(["right", "left"]))
        src_idx = int(rng.integers(0, len(tumor_set)))
        patch = _fit_patch(tumor_set.patches[src_idx].patch, h, w, max_patch_frac)
        ph, pw = patch.shape
        center = _place_center(rng, fg[side][0], fg[side][1], ph, pw, h, w, max_attempts)
        alpha = gaussian_alpha(h, w, center, ph, pw, alpha_peak)
        working.patches.append(TumorPatch(patch, source_id=tumor_set.patches[src_idx].source_id))
        per_side[side].append(TumorInsertion(len(working.patches) - 1, center, alpha))

    fakes, masks, reals = {}, {}, {}
    for side in ("right", "left"):
        if per_side[side]:
            fakes[side] = blend_tumors(images[side], per_side[side], working)
            union = np.zeros((h, w), dtype=bool)
            for ins in per_side[side]:
                union |= ins.alpha > mask_threshold
            masks[side] = union.astype(np.uint8)
            reals[side] = images[side].pixels.copy()
        else:
            fakes[side] = images[side]
            masks[side] = np.zeros((h, w), dtype=np.uint8)
            reals[side] = None

    y_r = 1 if per_side["right"] else 0
    y_l = 1 if per_side["left"] else 0
    fake_pair = imgio.BilateralPair(
        right=fakes["right"], left=fakes["left"], y_r=y_r, y_l=y_l, y_asy=1,
        mask_r=masks["right"] if y_r else None,
        mask_l=masks["left"] if y_l else None,
        pair_id=pair.pair_id + "+syn",
        real_right=reals["right"], real_left=reals["left"])
    return SynthesisRecord(fake_pair=fake_pair, real_pair=pair,
                           inserted_mask_r=masks["right"],
                           inserted_mask_l=masks["left"], seed=int(rng_seed))


# ---------------------------------------------------------------------------
# Tumor library: extraction from masked datasets, procedural blobs, persistence
# ---------------------------------------------------------------------------

def extract_tumor_patches(manifest: imgio.Manifest, origin_dataset: str = "",
                          min_size: int = 4) -> TumorSet:
    """Crop one patch per connected lesion component of every manifest mask."""
    patches = []
    masked_rows = [r for r in manifest.rows if r.has_masks]
    if not masked_rows:
        raise EmptyTumorSetError("manifest rows carry no lesion masks")
    for row in masked_rows:
        for side, img_path, mask_path in (("right", row.right_path, row.mask_r_path),
                                          ("left", row.left_path, row.mask_l_path)):
            if mask_path is None:
                continue
            img = imgio.read_image(manifest.root / img_path)
            mask = imgio.read_mask(manifest.root / mask_path)
            if mask.shape != img.shape:
                raise ShapeError(f"{row.pair_id}/{side}: mask shape {mask.shape} "
                                 f"vs image {img.shape}")
            labels = cc_label(mask > 0, connectivity=2)
            for comp in range(1, labels.max() + 1):
                rows_, cols_ = np.nonzero(labels == comp)
                r0, r1 = rows_.min(), rows_.max() + 1
                c0, c1 = cols_.min(), cols_.max() + 1
                if r1 - r0 < min_size or c1 - c0 < min_size:
                    continue
                crop = img[r0:r1, c0:c1]
                lo, hi = crop.min(), crop.max()
                if hi - lo <= 0:
                    continue
                patches.append(TumorPatch((crop - lo) / (hi - lo),
                                          source_id=f"{row.pair_id}:{side}:{comp}",
                                          bbox=(int(r0), int(c0), int(r1), int(c1))))
    if not patches:
        raise EmptyTumorSetError("no usable lesion components found in the masks")
    return TumorSet(patches=patches, origin_dataset=origin_dataset)


def _blob_patch(rng, ph: int, pw: int) -> np.ndarray:
    """Dark elliptical blob with mild texture, trough near 0.

    The patch holds target intensities; the Gaussian alpha map does the
    spatial shaping, so a flat dark patch blends into a smooth dark mass.
    """
    tex = gaussian_filter(rng.standard_normal((ph, pw)), sigma=max(1.0, ph / 8.0))
    tex = 0.15 * tex / max(1e-9, np.abs(tex).max())
    depth = rng.uniform(0.9, 1.0)
    return np.clip(1.0 - depth * (1.0 + tex), 0.0, 1.0)


def procedural_tumor_set(rng_seed: int, count: int = 16, size_range=(8, 20),
                         origin_dataset: str = "procedural") -> TumorSet:
    """Generate a library of procedural dark-blob patches."""
    lo, hi = int(size_range[0]), int(size_range[1])
    if lo < 4 or hi < lo:
        raise ConfigError(f"invalid blob size_range {size_range}")
    rng = np.random.default_rng(rng_seed)
    patches = []
    for k in range(count):
        ph = int(rng.integers(lo, hi + 1))
        pw = int(np.clip(round(ph * rng.uniform(0.7, 1.4)), lo, hi))
        patches.append(TumorPatch(_blob_patch(rng, ph, pw), source_id=f"blob:{k}"))
    return TumorSet(patches=patches, origin_dataset=origin_dataset)


def save_tumor_set(tumor_set: TumorSet, out_dir) -> None:
    """Persist a tumor set as PNG patches plus an index CSV and a meta file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "index.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "source_id", "row0", "col0", "row1", "col1"])
        for i, p in enumerate(tumor_set.patches):
            name = f"patch_{i:04d}.png"
            imgio.write_image(out_dir / name, p.patch, bit_depth=16)
            bbox = p.bbox if p.bbox is not None else ("", "", "", "")
            writer.writerow([name, p.source_id, *bbox])
    (out_dir / "tumorset.json").write_text(json.dumps(
        {"origin_dataset": tumor_set.origin_dataset, "count": len(tumor_set)}, indent=2))


def load_tumor_set(in_dir) -> TumorSet:
    in_dir = Path(in_dir)
    index = in_dir / "index.csv"
    if not index.exists():
        raise DataError(f"tumor set index not found: {index}")
    meta = {}
    meta_path = in_dir / "tumorset.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
    patches = []
    with open(index, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            bbox = None
            if rec.get("row0"):
                bbox = tuple(int(rec[k]) for k in ("row0", "col0", "row1", "col1"))
            patches.append(TumorPatch(imgio.read_image(in_dir / rec["file"]),
                                      source_id=rec["source_id"], bbox=bbox))
    if not patches:
        raise EmptyTumorSetError(f"tumor set at {in_dir} is empty")
    return TumorSet(patches=patches, origin_dataset=meta.get("origin_dataset", ""))


# ---------------------------------------------------------------------------
# Procedural phantom pairs
# ---------------------------------------------------------------------------

@dataclass
class PhantomConfig:
    """Geometry and randomness knobs for the procedural phantom generator."""

    height: int = 128
    width: int = 64
    noise: float = 0.002
    lesion_prob: float = 0.5          # per side
    lesion_size_frac: tuple = (0.20, 0.32)  # of image height
    alpha_peak: float = 0.9
    mask_threshold: float = 0.25
    fg_threshold: float = 0.05
    view: str = "CC"

    def lesion_size_range(self):
        lo = max(4, int(round(self.lesion_size_frac[0] * self.height)))
        hi = max(lo, int(round(self.lesion_size_frac[1] * self.height)))
        return lo, hi


def _phantom_base(rng, h, w):
    """Half-ellipse breast attached to the chest wall (column 0) with smooth texture."""
    a_r = h * rng.uniform(0.40, 0.47)
    a_c = w * rng.uniform(0.85, 0.97)
    cr = h / 2.0 + rng.uniform(-0.03, 0.03) * h
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    rho2 = ((rr - cr) / a_r) ** 2 + (cc / a_c) ** 2
    inside = rho2 <= 1.0
    lowfreq = gaussian_filter(rng.standard_normal((h, w)), sigma=h / 6.0)
    lowfreq = (lowfreq - lowfreq.min()) / max(1e-9, lowfreq.max() - lowfreq.min())
    base = (0.40 + 0.04 * lowfreq + 0.10 * (1.0 - np.clip(rho2, 0.0, 1.0))) * inside
    return np.clip(base, 0.0, 1.0), inside


def _insert_phantom_lesions(img: imgio.GrayImage, rng, cfg: PhantomConfig):
    """Blend 1-3 procedural blobs into one side; returns (fake, mask)."""
    h, w = img.pixels.shape
    n = int(rng.integers(1, 4))
    lo, hi = cfg.lesion_size_range()
    fg_rows, fg_cols = np.nonzero(img.pixels > cfg.fg_threshold)
    working = TumorSet(patches=[], origin_dataset="procedural")
    insertions = []
    union = np.zeros((h, w), dtype=bool)
    for _ in range(n):
        ph = int(rng.integers(lo, hi + 1))
        pw = int(np.clip(round(ph * rng.uniform(0.7, 1.4)), lo, hi))
        patch = _blob_patch(rng, ph, pw)
        center = _place_center(rng, fg_rows, fg_cols, ph, pw, h, w, max_attempts=100)
        alpha = gaussian_alpha(h, w, center, ph, pw, cfg.alpha_peak)
        working.patches.append(TumorPatch(patch))
        insertions.append(TumorInsertion(len(working.patches) - 1, center, alpha))
        union |= alpha > cfg.mask_threshold
    return blend_tumors(img, insertions, working), union.astype(np.uint8)


def generate_phantom(rng_seed, config: PhantomConfig | None = None) -> imgio.BilateralPair:
    """Generate one canonical phantom pair, optionally with per-side lesions.

    Right and left are mirror-identical up to independent pixel noise; lesions
    are drawn per side with probability config.lesion_prob. Lesioned sides get
    ground-truth masks and keep their pre-insertion image in ``real_*``.
    """
    cfg = config or PhantomConfig()
    rng = np.random.default_rng(rng_seed)
    h, w = cfg.height, cfg.width
    base, inside = _phantom_base(rng, h, w)
    sides = {}
    for lat in ("right", "left"):
        noisy = np.clip(base + rng.standard_normal((h, w)) * cfg.noise * inside, 0.0, 1.0)
        sides[lat] = imgio.GrayImage(noisy, laterality=lat, view=cfg.view)

    masks = {"right": None, "left": None}
    reals = {"right": None, "left": None}
    labels = {"right": 0, "left": 0}
    for lat in ("right", "left"):
        if rng.uniform() < cfg.lesion_prob:
            clean = sides[lat].pixels.copy()
            sides[lat], masks[lat] = _insert_phantom_lesions(sides[lat], rng, cfg)
            reals[lat] = clean
            labels[lat] = 1
    y_asy = 1 - (1 - labels["right"]) * (1 - labels["left"])
    return imgio.BilateralPair(right=sides["right"], left=sides["left"],
                               y_r=labels["right"], y_l=labels["left"], y_asy=y_asy,
                               mask_r=masks["right"], mask_l=masks["left"],
                               real_right=reals["right"], real_left=reals["left"])


def write_phantom_dataset(out_dir, num_pairs: int, seed: int,
                          config: PhantomConfig | None = None,
                          split_fracs=(0.7, 0.15, 0.15)) -> dict:
    """Emit a complete phantom dataset: PNGs, masks, clean references, manifests.

    Left-side files are stored in raw (unmirrored) orientation so the loading
    pipeline exercises the mirroring contract. Returns {split: manifest path}.
    """
    cfg = config or PhantomConfig()
    if abs(sum(split_fracs) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {split_fracs}")
    out_dir = Path(out_dir)
    for sub in ("images", "masks", "clean"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(num_pairs)
    rows = []
    for i, child in enumerate(children):
        pair = generate_phantom(child, cfg)
        pid = f"p{i:05d}"
        paths = {}
        for lat, short in (("right", "r"), ("left", "l")):
            img = getattr(pair, lat)
            raw = img.pixels if lat == "right" else img.pixels[:, ::-1]
            paths[f"{short}_img"] = f"images/{pid}_{short}.png"
            imgio.write_image(out_dir / paths[f"{short}_img"], raw)
            mask = getattr(pair, f"mask_{short}")
            if mask is not None:
                m = mask if lat == "right" else mask[:, ::-1]
                paths[f"{short}_mask"] = f"masks/{pid}_{short}.png"
                imgio.write_mask(out_dir / paths[f"{short}_mask"], m)
            real = getattr(pair, f"real_{lat}")
            if real is not None:
                rw = real if lat == "right" else real[:, ::-1]
                paths[f"{short}_real"] = f"clean/{pid}_{short}.png"
                imgio.write_image(out_dir / paths[f"{short}_real"], rw)
        rows.append(imgio.ManifestRow(
            pair_id=pid, right_path=paths["r_img"], left_path=paths["l_img"],
            view=cfg.view, y_r=pair.y_r, y_l=pair.y_l, y_asy=pair.y_asy,
            mask_r_path=paths.get("r_mask"), mask_l_path=paths.get("l_mask"),
            real_r_path=paths.get("r_real"), real_l_path=paths.get("l_real")))

    n_train = int(round(split_fracs[0] * num_pairs))
    n_val = int(round(split_fracs[1] * num_pairs))
    splits = {"train": rows[:n_train],
              "val": rows[n_train:n_train + n_val],
              "test": rows[n_train + n_val:]}
    manifest_paths = {}
    for split, split_rows in splits.items():
        m = imgio.Manifest(rows=split_rows, split=split, root=out_dir)
        path = out_dir / f"{split}.csv"
        imgio.write_manifest(m, path)
        manifest_paths[split] = path
    (out_dir / "dataset.json").write_text(json.dumps({
        "num_pairs": num_pairs, "seed": seed, "height": cfg.height,
        "width": cfg.width, "noise": cfg.noise, "lesion_prob": cfg.lesion_prob,
        "splits": {k: len(v) for k, v in splits.items()}}, indent=2))
    return manifest_paths
