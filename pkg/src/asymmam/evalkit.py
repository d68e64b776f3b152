"""Classification, segmentation, and localization metrics, plus the full
checkpoint evaluation driver.

AUC is the rank-based Mann-Whitney statistic (ties get half credit) with a
percentile-bootstrap confidence interval. CAMs are binarized at a fixed
threshold and scored against ground-truth masks with IoU / IoR / Dice; the
localization summaries mean TIoU / mean TIoR average, over fixed threshold
grids, the fraction of images whose value strictly exceeds each threshold.
"""

from __future__ import annotations

import csv
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import (ConfigError, DataError, ShapeError, UndefinedMetricError)

TIOU_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
TIOR_GRID = (0.1, 0.25, 0.5, 0.75, 0.9)


def _scores_labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or y.shape != s.shape:
        raise DataError("scores and labels must be 1-D sequences of equal length")
    if s.size == 0:
        raise UndefinedMetricError("no scores")
    if not np.isfinite(s).all():
        raise DataError("scores must be finite")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be binary 0/1")
    return s, y.astype(np.int64)


def auc(scores, labels) -> float:
    """Area under the ROC curve: (concordant + 0.5*tied) / (P*N)."""
    s, y = _scores_labels(scores, labels)
    pos = int((y == 1).sum())
    neg = int((y == 0).sum())
    if pos == 0 or neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - pos * (pos + 1) / 2.0) / (pos * neg))


def bootstrap_ci(scores, labels, n_resamples=1000, seed=0):
    """95% percentile-bootstrap interval for the AUC.

    Resamples drawing only one class are discarded and redrawn, so every kept
    resample has a defined AUC. Deterministic per seed.
    """
    if n_resamples < 1000:
        raise ConfigError(f"n_resamples must be >= 1000, got {n_resamples}")
    s, y = _scores_labels(scores, labels)
    auc(s, y)  # validates both classes are present
    rng = np.random.default_rng(seed)
    n = s.size
    vals = np.empty(n_resamples)
    k = 0
    while k < n_resamples:
        idx = rng.integers(0, n, n)
        yy = y[idx]
        if yy.min() == yy.max():
            continue
        vals[k] = auc(s[idx], yy)
        k += 1
    lo, hi = np.percentile(vals, [2.5, 97.5])
    return float(lo), float(hi)


def binarize_cam(cam, threshold: float = 0.5):
    if not (0.0 < threshold < 1.0):
        raise ConfigError(f"cam threshold must lie in (0, 1), got {threshold}")
    cam = np.asarray(cam, dtype=np.float64)
    return (cam >= threshold).astype(np.uint8)


def _as_mask(m, name):
    a = np.asarray(m)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.isin(a, (0, 1)).all():
        raise DataError(f"{name} must be {{0,1}}-valued")
    return a.astype(bool)


def _overlap(pred, ref):
    p = _as_mask(pred, "pred")
    r = _as_mask(ref, "ref")
    if p.shape != r.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {r.shape}")
    return (p & r).sum(), p.sum(), r.sum()


def iou(pred, ref) -> float:
    inter, np_, nr = _overlap(pred, ref)
    union = np_ + nr - inter
    if union == 0:
        return 1.0  # both empty: defined as perfect agreement
    return float(inter / union)


def ior(pred, ref) -> float:
    inter, _, nr = _overlap(pred, ref)
    if nr == 0:
        raise UndefinedMetricError("IoR undefined for an empty reference mask")
    return float(inter / nr)


def dice(pred, ref) -> float:
    inter, np_, nr = _overlap(pred, ref)
    if np_ + nr == 0:
        return 1.0
    return float(2.0 * inter / (np_ + nr))


def _mean_threshold_accuracy(values, grid, name):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise UndefinedMetricError(f"{name} needs at least one value")
    if v.min() < 0 or v.max() > 1:
        raise DataError(f"{name} values must lie in [0, 1]")
    # strict >: a value exactly at a grid threshold does not count for it
    return float(np.mean([(v > t).mean() for t in grid]))


def mean_tiou(per_image_ious) -> float:
    return _mean_threshold_accuracy(per_image_ious, TIOU_GRID, "mean_tiou")


def mean_tior(per_image_iors) -> float:
    return _mean_threshold_accuracy(per_image_iors, TIOR_GRID, "mean_tior")


# ---------------------------------------------------------------------------
# Checkpoint evaluation
# ---------------------------------------------------------------------------

@dataclass
class PerImageRecord:
    pair_id: str
    side: str
    score: float
    label: int
    iou: float | None = None
    ior: float | None = None
    dice: float | None = None


@dataclass
class EvalReport:
    auc_abnormal: float | None = None
    auc_abnormal_ci: tuple | None = None
    auc_asymmetry: float | None = None
    auc_asymmetry_ci: tuple | None = None
    mean_iou: float | None = None
    mean_ior: float | None = None
    mean_dice: float | None = None
    mean_tiou: float | None = None
    mean_tior: float | None = None
    recon_win_rate: float | None = None
    n_pairs: int = 0
    n_masked_sides: int = 0
    per_image: list = field(default_factory=list)


def _warn(msg):
    print(f"warning: {msg}", file=sys.stderr)


def evaluate(checkpoint_path, manifest_path, run_cfg=None, out_dir=None,
             overlays=True) -> EvalReport:
    """Run a frozen checkpoint over a manifest and compute every metric.

    Segmentation/localization metrics cover the sides that carry a nonempty
    ground-truth mask; when no row has masks they are skipped with a warning
    and classification is still reported. When out_dir is given, writes
    report.csv, per_image.csv, and (optionally) per-pair overlay PNGs.
    """
    import torch

    from . import imgio
    from .asyd import decode_pair_features
    from .selfadv import PairDataset, load_checkpoint

    model, decoder, ckpt_cfg, _ = load_checkpoint(checkpoint_path)
    cfg = run_cfg or ckpt_cfg
    dtype = torch.float64 if ckpt_cfg.deterministic else torch.float32
    dataset = PairDataset(manifest_path, ckpt_cfg.image_h, ckpt_cfg.image_w)
    model.eval()
    decoder.eval()

    report = EvalReport(n_pairs=len(dataset))
    side_scores, side_labels, asy_scores, asy_labels = [], [], [], []
    ious, iors, dices = [], [], []
    recon_wins = []
    overlay_jobs = []

    with torch.no_grad():
        for i in range(len(dataset)):
            pair = dataset.get(i)
            x_r = torch.from_numpy(pair.right.pixels).to(dtype)[None, None]
            x_l = torch.from_numpy(pair.left.pixels).to(dtype)[None, None]
            out, skips = model.forward_features(x_r, x_l)
            x_n_r, x_n_l, _, _ = decode_pair_features(decoder, out, skips)
            asy_scores.append(float(out.p_asy))
            asy_labels.append(pair.y_asy)
            pair_l1 = {"recon": [], "input": []}
            for side, p, cam, x_n, x_in in (
                    ("right", float(out.p_r), out.cam_r[0].numpy(), x_n_r[0].numpy(),
                     pair.right.pixels),
                    ("left", float(out.p_l), out.cam_l[0].numpy(), x_n_l[0].numpy(),
                     pair.left.pixels)):
                label = pair.y_r if side == "right" else pair.y_l
                side_scores.append(p)
                side_labels.append(label)
                rec = PerImageRecord(pair.pair_id, side, p, label)
                mask = pair.mask_r if side == "right" else pair.mask_l
                if mask is not None and mask.sum() > 0:
                    pred = binarize_cam(cam, cfg.cam_threshold)
                    rec.iou = iou(pred, mask)
                    rec.ior = ior(pred, mask)
                    rec.dice = dice(pred, mask)
                    ious.append(rec.iou)
                    iors.append(rec.ior)
                    dices.append(rec.dice)
                    report.n_masked_sides += 1
                real = pair.real_right if side == "right" else pair.real_left
                if real is not None:
                    pair_l1["recon"].append(float(np.abs(x_n - real).mean()))
                    pair_l1["input"].append(float(np.abs(x_in - real).mean()))
                report.per_image.append(rec)
            if pair_l1["recon"]:
                recon_wins.append(np.mean(pair_l1["recon"]) < np.mean(pair_l1["input"]))
            if overlays and out_dir is not None and pair.has_any_mask:
                overlay_jobs.append((pair, out.cam_r[0].numpy(), out.cam_l[0].numpy()))

    try:
        report.auc_abnormal = auc(side_scores, side_labels)
        report.auc_abnormal_ci = bootstrap_ci(side_scores, side_labels,
                                              cfg.bootstrap_resamples, cfg.seed)
    except UndefinedMetricError:
        _warn("abnormality labels are single-class; AUC skipped")
    try:
        report.auc_asymmetry = auc(asy_scores, asy_labels)
        report.auc_asymmetry_ci = bootstrap_ci(asy_scores, asy_labels,
                                               cfg.bootstrap_resamples, cfg.seed)
    except UndefinedMetricError:
        _warn("asymmetry labels are single-class; AUC skipped")

    if ious:
        report.mean_iou = float(np.mean(ious))
        report.mean_ior = float(np.mean(iors))
        report.mean_dice = float(np.mean(dices))
        report.mean_tiou = mean_tiou(ious)
        report.mean_tior = mean_tior(iors)
    else:
        _warn("no nonempty ground-truth masks in the manifest; "
              "segmentation metrics skipped")
    if recon_wins:
        report.recon_win_rate = float(np.mean(recon_wins))

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_report(report, out_dir)
        for pair, cam_r, cam_l in overlay_jobs:
            _render_overlay(pair, cam_r, cam_l, cfg.cam_threshold,
                            out_dir / "overlays" / f"{pair.pair_id}.png")
    return report


def _write_report(report: EvalReport, out_dir: Path):
    with open(out_dir / "report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value", "ci_lo", "ci_hi"])

        def row(name, value, ci=None):
            if value is None:
                return
            lo, hi = ci if ci else ("", "")
            w.writerow([name, value, lo, hi])

        row("auc_abnormal", report.auc_abnormal, report.auc_abnormal_ci)
        row("auc_asymmetry", report.auc_asymmetry, report.auc_asymmetry_ci)
        for name in ("mean_iou", "mean_ior", "mean_dice", "mean_tiou", "mean_tior",
                     "recon_win_rate"):
            row(name, getattr(report, name))
        w.writerow(["n_pairs", report.n_pairs, "", ""])
        w.writerow(["n_masked_sides", report.n_masked_sides, "", ""])
    with open(out_dir / "per_image.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["pair_id", "side", "score", "label", "iou", "ior", "dice"])
        for r in report.per_image:
            w.writerow([r.pair_id, r.side, r.score, r.label,
                        "" if r.iou is None else r.iou,
                        "" if r.ior is None else r.ior,
                        "" if r.dice is None else r.dice])


def _render_overlay(pair, cam_r, cam_l, threshold, out_path):
    """Side-by-side panels: image + translucent CAM + contour at the
    binarization threshold + ground-truth mask outline."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, 2, figsize=(6, 5))
    for ax, img, cam, mask, title in (
            (axes[0], pair.right.pixels, cam_r, pair.mask_r, "right"),
            (axes[1], pair.left.pixels, cam_l, pair.mask_l, "left")):
        ax.imshow(img, cmap="gray", vmin=0, vmax=1)
        ax.imshow(cam, cmap="jet", alpha=0.35, vmin=0, vmax=1)
        if cam.max() >= threshold:
            ax.contour(cam, levels=[threshold], colors="red", linewidths=1.0)
        if mask is not None and mask.sum() > 0:
            ax.contour(mask, levels=[0.5], colors="lime", linewidths=1.0)
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.suptitle(pair.pair_id, fontsize=10)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
