"""Loss assembly and the two-objective self-adversarial training engine.

Each training step runs two phases. Phase 1 snapshots the classifier into a
frozen discriminator, then minimizes

    L = l1*L_diag + l2*L_rec + l3*L_dics + l4*L_syn

updating classifier and decoder together: L_diag is the three-head BCE on the
input pair, L_rec reconstructs the input through the CAM-split channels,
L_dics scores the decoded normals with the frozen discriminator against
all-zero (symmetric) targets, and L_syn supervises decoded normals of
synthesized pairs with their stored pre-insertion images. Phase 2 re-runs the
classifier on the detached decoded normals with the original labels (L_refine)
and updates the classifier alone.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import config as cfgmod
from . import evalkit, imgio, synthlab
from .asyc import AsycModel
from .asyd import UNetDecoder, decode_pair_features
from .errors import ConfigError, DataError, ShapeError, TrainingAbort

LOGIT_CLAMP = 15.0


@dataclass
class LossWeights:
    lambda_diag: float = 1.0
    lambda_rec: float = 0.1
    lambda_dics: float = 1.0
    lambda_syn: float = 0.5

    def __post_init__(self):
        for name in ("lambda_diag", "lambda_rec", "lambda_dics", "lambda_syn"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _check_binary(t, name):
    if not torch.all((t == 0) | (t == 1)):
        raise DataError(f"{name} must be binary 0/1")


def bce_logits(logit, target):
    """Stable BCE from logits; logits clamped to +-15 to bound the loss."""
    return F.binary_cross_entropy_with_logits(logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP),
                                              target.to(logit.dtype))


def loss_cls(logit_asy, logit_r, logit_l, y_asy, y_r, y_l):
    """Three-head classification loss: BCE(asy) + BCE(right) + BCE(left).

    Each term is a mean over the batch.
    """
    for t, name in ((y_asy, "y_asy"), (y_r, "y_r"), (y_l, "y_l")):
        _check_binary(t, name)
    return (bce_logits(logit_asy, y_asy) + bce_logits(logit_r, y_r)
            + bce_logits(logit_l, y_l))


def loss_rec(x, x_n, x_ab, cam):
    """CAM-split reconstruction for one side:
    mean|(1-M)x - (1-M)x_n| + mean|Mx - x_ab|.
    """
    if not (x.shape == x_n.shape == x_ab.shape == cam.shape):
        raise ShapeError(f"loss_rec shape mismatch: {tuple(x.shape)}, "
                         f"{tuple(x_n.shape)}, {tuple(x_ab.shape)}, {tuple(cam.shape)}")
    keep = 1.0 - cam
    return (keep * x - keep * x_n).abs().mean() + (cam * x - x_ab).abs().mean()


def copy_discriminator(model: AsycModel, into: AsycModel | None = None) -> AsycModel:
    """Deep-copy the classifier into a frozen discriminator.

    The copy is entry-wise identical (parameters and buffers), excluded from
    gradient computation, and held in eval mode.
    """
    if into is None:
        p = next(model.parameters())
        into = AsycModel(model.cfg).to(device=p.device, dtype=p.dtype)
    into.load_state_dict(model.state_dict())
    into.eval()
    for p in into.parameters():
        p.requires_grad_(False)
    return into


def loss_dics(disc: AsycModel, x_n_r, x_n_l):
    """Frozen-discriminator symmetry loss: classify decoded normals as
    (normal, normal, symmetric). Gradients reach only the inputs."""
    out = disc(x_n_r.unsqueeze(1), x_n_l.unsqueeze(1))
    zeros = torch.zeros_like(out.logit_r)
    return loss_cls(out.logit_asy, out.logit_r, out.logit_l, zeros, zeros, zeros)


def loss_syn(x_n_r, x_n_l, batch):
    """Synthesis supervision: mean |pre-insertion real - decoded normal| per
    side, summed over the synthesized sides of the batch."""
    per_r = (x_n_r - batch.real_r).abs().mean(dim=(1, 2))
    per_l = (x_n_l - batch.real_l).abs().mean(dim=(1, 2))
    return ((per_r * batch.syn_r.to(per_r.dtype)).sum()
            + (per_l * batch.syn_l.to(per_l.dtype)).sum())


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------

@dataclass
class TrainBatch:
    x_r: torch.Tensor        # (B, 1, H, W)
    x_l: torch.Tensor
    y_r: torch.Tensor        # (B,)
    y_l: torch.Tensor
    y_asy: torch.Tensor
    real_r: torch.Tensor     # (B, H, W); zeros where not synthesized
    real_l: torch.Tensor
    syn_r: torch.Tensor      # (B,) bool
    syn_l: torch.Tensor
    pair_ids: list = field(default_factory=list)

    @property
    def size(self):
        return self.x_r.shape[0]


def collate(items, dtype=torch.float32, device="cpu"):
    """items: list of (BilateralPair, syn_r, syn_l) -> TrainBatch."""
    if not items:
        raise DataError("cannot collate an empty batch")
    h, w = items[0][0].shape

    def img(a):
        return torch.from_numpy(np.ascontiguousarray(a)).to(dtype=dtype, device=device)

    xs_r, xs_l, reals_r, reals_l = [], [], [], []
    for pair, syn_r, syn_l in items:
        if pair.shape != (h, w):
            raise DataError("all pairs in a batch must share canonical dimensions")
        xs_r.append(img(pair.right.pixels))
        xs_l.append(img(pair.left.pixels))
        if syn_r and pair.real_right is None:
            raise DataError(f"pair {pair.pair_id!r} flagged as synthesized on the "
                            "right but carries no pre-insertion image")
        if syn_l and pair.real_left is None:
            raise DataError(f"pair {pair.pair_id!r} flagged as synthesized on the "
                            "left but carries no pre-insertion image")
        reals_r.append(img(pair.real_right) if syn_r else torch.zeros(h, w, dtype=dtype, device=device))
        reals_l.append(img(pair.real_left) if syn_l else torch.zeros(h, w, dtype=dtype, device=device))

    lab = lambda vals: torch.tensor(vals, dtype=dtype, device=device)
    return TrainBatch(
        x_r=torch.stack(xs_r).unsqueeze(1), x_l=torch.stack(xs_l).unsqueeze(1),
        y_r=lab([p.y_r for p, _, _ in items]), y_l=lab([p.y_l for p, _, _ in items]),
        y_asy=lab([p.y_asy for p, _, _ in items]),
        real_r=torch.stack(reals_r), real_l=torch.stack(reals_l),
        syn_r=torch.tensor([s for _, s, _ in items], device=device),
        syn_l=torch.tensor([s for _, _, s in items], device=device),
        pair_ids=[p.pair_id for p, _, _ in items])


def derive_seed(*parts) -> int:
    """Stateless child seed from integer coordinates (seed, epoch, step, ...)."""
    return int(np.random.SeedSequence(tuple(int(p) for p in parts)).generate_state(1)[0])


class PairDataset:
    """Manifest-backed dataset of preprocessed pairs, cached in memory."""

    def __init__(self, manifest_path, image_h, image_w, cache=True):
        self.manifest = imgio.load_manifest(manifest_path)
        self.image_h, self.image_w = image_h, image_w
        self._cache = {} if cache else None

    def __len__(self):
        return len(self.manifest)

    def get(self, i) -> imgio.BilateralPair:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        pair = imgio.load_pair(self.manifest.rows[i], self.manifest.root,
                               self.image_h, self.image_w)
        if self._cache is not None:
            self._cache[i] = pair
        return pair


def epoch_batches(n, batch_size, seed, epoch):
    """Deterministic shuffled index batches for one epoch."""
    order = np.random.default_rng(
        np.random.SeedSequence((int(seed), int(epoch), 17))).permutation(n)
    for step, start in enumerate(range(0, n, batch_size)):
        yield step, order[start:start + batch_size]


def assemble_items(dataset, indices, cfg, epoch, step, tumor_set):
    """Augment and (for symmetric pairs) optionally synthesize one batch.

    All randomness derives from (cfg.seed, epoch, step, position), so any
    batch can be rebuilt in isolation -- resume needs no RNG state.
    """
    items = []
    for j, i in enumerate(indices):
        pair = dataset.get(int(i))
        if cfg.augment:
            pair = imgio.augment_pair(pair, derive_seed(cfg.seed, epoch, step, j, 1),
                                      (cfg.zoom_lo, cfg.zoom_hi), cfg.crop_fraction)
        syn_r = syn_l = False
        if (pair.y_asy == 0 and tumor_set is not None and cfg.synth_fraction > 0
                and np.random.default_rng(
                    np.random.SeedSequence((cfg.seed, epoch, step, j, 2))
                ).uniform() < cfg.synth_fraction):
            rec = synthlab.synthesize_asymmetric(
                pair, tumor_set, derive_seed(cfg.seed, epoch, step, j, 3),
                side_policy=cfg.side_policy, alpha_peak=cfg.alpha_peak,
                mask_threshold=cfg.alpha_mask_threshold,
                fg_threshold=cfg.foreground_threshold)
            pair = rec.fake_pair
            syn_r = pair.real_right is not None
            syn_l = pair.real_left is not None
        items.append((pair, syn_r, syn_l))
    return items


# ---------------------------------------------------------------------------
# Phase-1 loss evaluation (shared by the trainer and the gradient audit)
# ---------------------------------------------------------------------------

def phase1_losses(model, decoder, disc, batch: TrainBatch, weights: LossWeights):
    """All phase-1 components and the weighted total, as live tensors."""
    out, skips = model.forward_features(batch.x_r, batch.x_l)
    x_n_r, x_n_l, x_ab_r, x_ab_l = decode_pair_features(decoder, out, skips)
    l_diag = loss_cls(out.logit_asy, out.logit_r, out.logit_l,
                      batch.y_asy, batch.y_r, batch.y_l)
    l_rec = (loss_rec(batch.x_r.squeeze(1), x_n_r, x_ab_r, out.cam_r)
             + loss_rec(batch.x_l.squeeze(1), x_n_l, x_ab_l, out.cam_l))
    l_dics = loss_dics(disc, x_n_r, x_n_l)
    l_syn = loss_syn(x_n_r, x_n_l, batch)
    total = (weights.lambda_diag * l_diag + weights.lambda_rec * l_rec
             + weights.lambda_dics * l_dics + weights.lambda_syn * l_syn)
    return {"loss": total, "loss_diag": l_diag, "loss_rec": l_rec,
            "loss_dics": l_dics, "loss_syn": l_syn,
            "x_n_r": x_n_r, "x_n_l": x_n_l, "x_ab_r": x_ab_r, "x_ab_l": x_ab_l}


def _check_finite(values: dict):
    for name, t in values.items():
        if torch.is_tensor(t) and not torch.isfinite(t).all():
            raise TrainingAbort(f"non-finite value in component {name!r}")


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

class Trainer:
    """Owns the parameter stores and runs the two-phase step.

    One Adam instance covers the classifier across both phases; the decoder
    has its own. The frozen discriminator is a single reused module refreshed
    by copy at the start of every phase 1.
    """

    def __init__(self, model: AsycModel, decoder: UNetDecoder,
                 weights: LossWeights | None = None, lr=1e-4, lr_decay=0.1,
                 decay_epochs=20, grad_clip=1.0, device="cpu", dtype=torch.float32):
        self.device, self.dtype = device, dtype
        self.model = model.to(device=device, dtype=dtype)
        self.decoder = decoder.to(device=device, dtype=dtype)
        self.weights = weights or LossWeights()
        self.base_lr = lr
        self.lr_decay = lr_decay
        self.decay_epochs = decay_epochs
        self.grad_clip = grad_clip
        self.opt_asyc = torch.optim.Adam(self.model.parameters(), lr=lr)
        self.opt_g = torch.optim.Adam(self.decoder.parameters(), lr=lr)
        self.disc = copy_discriminator(self.model)
        self.step_count = 0
        self.epoch = 0

    def lr_at(self, epoch) -> float:
        return self.base_lr * self.lr_decay ** (epoch // self.decay_epochs)

    def set_epoch(self, epoch) -> float:
        self.epoch = epoch
        lr = self.lr_at(epoch)
        for group in self.opt_asyc.param_groups + self.opt_g.param_groups:
            group["lr"] = lr
        return lr

    def phase1(self, batch: TrainBatch):
        """Copy the discriminator, minimize the weighted total, step both
        optimizers. Returns detached loss components and decoded normals."""
        self.model.train()
        self.decoder.train()
        copy_discriminator(self.model, into=self.disc)
        losses = phase1_losses(self.model, self.decoder, self.disc, batch, self.weights)
        _check_finite(losses)
        self.opt_asyc.zero_grad(set_to_none=True)
        self.opt_g.zero_grad(set_to_none=True)
        losses["loss"].backward()
        if self.grad_clip > 0:
            nn.utils.clip_grad_norm_(self.model.parameters(), self.grad_clip)
            nn.utils.clip_grad_norm_(self.decoder.parameters(), self.grad_clip)
        self.opt_asyc.step()
        self.opt_g.step()
        return {k: (v.detach() if torch.is_tensor(v) else v) for k, v in losses.items()}

    def phase2(self, batch: TrainBatch, x_n_r, x_n_l) -> float:
        """Refinement: classify the detached decoded normals with the original
        labels; update the classifier only."""
        self.model.train()
        out = self.model(x_n_r.detach().unsqueeze(1), x_n_l.detach().unsqueeze(1))
        l_refine = loss_cls(out.logit_asy, out.logit_r, out.logit_l,
                            batch.y_asy, batch.y_r, batch.y_l)
        _check_finite({"loss_refine": l_refine})
        self.opt_asyc.zero_grad(set_to_none=True)
        l_refine.backward()
        if self.grad_clip > 0:
            nn.utils.clip_grad_norm_(self.model.parameters(), self.grad_clip)
        self.opt_asyc.step()
        return float(l_refine.detach())

    def train_step(self, batch: TrainBatch) -> dict:
        p1 = self.phase1(batch)
        # With every decoder loss gated off the generator never trains, so
        # refining the classifier on its untrained output would only inject
        # label noise; the step then reduces to plain supervised training.
        w = self.weights
        if w.lambda_rec == 0 and w.lambda_dics == 0 and w.lambda_syn == 0:
            l_refine = 0.0
        else:
            l_refine = self.phase2(batch, p1["x_n_r"], p1["x_n_l"])
        self.step_count += 1
        rec = {name: float(p1[name]) for name in
               ("loss", "loss_diag", "loss_rec", "loss_dics", "loss_syn")}
        rec.update(loss_refine=l_refine, step=self.step_count, epoch=self.epoch)
        return rec

    # -- checkpointing ------------------------------------------------------

    def save(self, path, run_cfg=None, best_val_auc=None):
        save_checkpoint(path, self.model, self.decoder, self.opt_asyc, self.opt_g,
                        run_cfg, self.epoch, self.step_count, best_val_auc)

    def load_training_state(self, blob):
        self.opt_asyc.load_state_dict(blob["opt_asyc_state"])
        self.opt_g.load_state_dict(blob["opt_g_state"])
        self.step_count = blob["step"]
        self.epoch = blob["epoch"]


CHECKPOINT_VERSION = 1


def save_checkpoint(path, model, decoder, opt_asyc, opt_g, run_cfg, epoch, step,
                    best_val_auc=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "config": cfgmod.to_dict(run_cfg) if run_cfg is not None else None,
        "model_state": model.state_dict(),
        "decoder_state": decoder.state_dict(),
        "opt_asyc_state": opt_asyc.state_dict(),
        "opt_g_state": opt_g.state_dict(),
        "epoch": epoch, "step": step, "best_val_auc": best_val_auc,
    }, path)


def load_checkpoint(path, device="cpu"):
    """Rebuild (model, decoder, run_cfg, blob) from a checkpoint file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location=device, weights_only=False)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint format: {blob.get('format_version')}")
    if blob.get("config") is None:
        raise DataError("checkpoint carries no config echo; cannot rebuild the model")
    run_cfg = cfgmod.from_dict(blob["config"])
    dtype = torch.float64 if run_cfg.deterministic else torch.float32
    model = AsycModel(cfgmod.asyc_config(run_cfg)).to(device=device, dtype=dtype)
    model.load_state_dict(blob["model_state"])
    decoder = UNetDecoder(model.cfg).to(device=device, dtype=dtype)
    decoder.load_state_dict(blob["decoder_state"])
    return model, decoder, run_cfg, blob


# ---------------------------------------------------------------------------
# Validation + full fit loop
# ---------------------------------------------------------------------------

def predict_scores(model, dataset, dtype=torch.float32, device="cpu", batch_size=8):
    """Inference over a dataset; returns per-side and per-pair score/label lists."""
    model.eval()
    side_scores, side_labels, asy_scores, asy_labels = [], [], [], []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            items = [(dataset.get(i), False, False)
                     for i in range(start, min(start + batch_size, len(dataset)))]
            batch = collate(items, dtype=dtype, device=device)
            out = model(batch.x_r, batch.x_l)
            side_scores += out.p_r.tolist() + out.p_l.tolist()
            side_labels += batch.y_r.tolist() + batch.y_l.tolist()
            asy_scores += out.p_asy.tolist()
            asy_labels += batch.y_asy.tolist()
    return side_scores, side_labels, asy_scores, asy_labels


def validate_aucs(model, dataset, dtype=torch.float32, device="cpu"):
    """(abnormal AUC, asymmetry AUC); None where the labels are single-class."""
    ss, sl, as_, al = predict_scores(model, dataset, dtype, device)
    try:
        auc_ab = evalkit.auc(ss, sl)
    except evalkit.UndefinedMetricError:
        auc_ab = None
    try:
        auc_asy = evalkit.auc(as_, al)
    except evalkit.UndefinedMetricError:
        auc_asy = None
    return auc_ab, auc_asy


def build_tumor_set(cfg) -> synthlab.TumorSet | None:
    """Tumor library per config: a saved set directory, else procedural blobs.

    Enforces the cross-dataset rule: the library's origin must differ from the
    training dataset's name.
    """
    if cfg.synth_fraction <= 0:
        return None
    if cfg.tumor_set:
        ts = synthlab.load_tumor_set(cfg.tumor_set)
        if cfg.tumor_set_origin and not ts.origin_dataset:
            ts.origin_dataset = cfg.tumor_set_origin
    else:
        ts = synthlab.procedural_tumor_set(
            derive_seed(cfg.seed, 0xB10B), count=cfg.tumor_count,
            size_range=(cfg.tumor_size_lo, cfg.tumor_size_hi),
            origin_dataset=cfg.tumor_set_origin or "procedural")
    origin = ts.origin_dataset or cfg.tumor_set_origin
    if origin and cfg.train_dataset and origin == cfg.train_dataset:
        raise ConfigError(f"tumor_set_origin {origin!r} must differ from "
                          f"train_dataset {cfg.train_dataset!r}")
    return ts


METRIC_FIELDS = ("step", "epoch", "lr", "loss", "loss_diag", "loss_rec",
                 "loss_dics", "loss_syn", "loss_refine")


def _plot_losses(metrics_rows, out_path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    steps = [r["step"] for r in metrics_rows]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for name in ("loss", "loss_diag", "loss_rec", "loss_dics", "loss_syn", "loss_refine"):
        ax.plot(steps, [r[name] for r in metrics_rows], label=name, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def fit(cfg, run_dir) -> dict:
    """Full training loop: epoch schedule, per-step metrics, checkpoints.

    Writes into run_dir: config.cfg (effective config echo), metrics.csv,
    val_metrics.csv, loss_curve.png, last.pt, and best.pt (highest mean of the
    available validation AUCs). Returns a summary dict with the key paths.
    """
    cfg.validate()
    for name in ("train_manifest",):
        p = getattr(cfg, name)
        if not p:
            raise ConfigError(f"{name} is required for training")
        if not Path(p).exists():
            raise ConfigError(f"{name} does not exist: {p}")
    if cfg.val_manifest and not Path(cfg.val_manifest).exists():
        raise ConfigError(f"val_manifest does not exist: {cfg.val_manifest}")

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.write_config(cfg, run_dir / "config.cfg")

    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    dtype = torch.float64 if cfg.deterministic else torch.float32
    torch.manual_seed(derive_seed(cfg.seed, 0x1217))

    asyc_cfg = cfgmod.asyc_config(cfg)
    model = AsycModel(asyc_cfg)
    decoder = UNetDecoder(asyc_cfg)
    trainer = Trainer(model, decoder,
                      weights=LossWeights(cfg.lambda_diag, cfg.lambda_rec,
                                          cfg.lambda_dics, cfg.lambda_syn),
                      lr=cfg.lr, lr_decay=cfg.lr_decay, decay_epochs=cfg.decay_epochs,
                      grad_clip=cfg.grad_clip, dtype=dtype)
    train_ds = PairDataset(cfg.train_manifest, cfg.image_h, cfg.image_w)
    val_ds = (PairDataset(cfg.val_manifest, cfg.image_h, cfg.image_w)
              if cfg.val_manifest else None)
    tumor_set = build_tumor_set(cfg)

    metrics_rows = []
    best = float("-inf")
    best_path, last_path = run_dir / "best.pt", run_dir / "last.pt"
    with open(run_dir / "metrics.csv", "w", newline="", encoding="utf-8") as mfh, \
         open(run_dir / "val_metrics.csv", "w", newline="", encoding="utf-8") as vfh:
        mwriter = csv.DictWriter(mfh, fieldnames=METRIC_FIELDS)
        mwriter.writeheader()
        vwriter = csv.DictWriter(vfh, fieldnames=("epoch", "lr", "auc_abnormal",
                                                  "auc_asymmetry"))
        vwriter.writeheader()
        for epoch in range(cfg.epochs):
            lr = trainer.set_epoch(epoch)
            for step, indices in epoch_batches(len(train_ds), cfg.batch_size,
                                               cfg.seed, epoch):
                items = assemble_items(train_ds, indices, cfg, epoch, step, tumor_set)
                batch = collate(items, dtype=dtype)
                rec = trainer.train_step(batch)
                rec["lr"] = lr
                metrics_rows.append(rec)
                mwriter.writerow(rec)
            mfh.flush()
            if val_ds is not None:
                auc_ab, auc_asy = validate_aucs(trainer.model, val_ds, dtype=dtype)
                vwriter.writerow({"epoch": epoch, "lr": lr,
                                  "auc_abnormal": auc_ab, "auc_asymmetry": auc_asy})
                vfh.flush()
                available = [a for a in (auc_ab, auc_asy) if a is not None]
                score = float(np.mean(available)) if available else float("-inf")
                if score > best:
                    best = score
                    trainer.save(best_path, cfg, best_val_auc=best)
            trainer.save(last_path, cfg, best_val_auc=None if best == float("-inf") else best)
    if not best_path.exists():
        best_path = last_path
    if metrics_rows:
        _plot_losses(metrics_rows, run_dir / "loss_curve.png")
    return {"run_dir": run_dir, "best_checkpoint": best_path,
            "last_checkpoint": last_path, "best_val_auc": None if best == float("-inf") else best,
            "metrics_csv": run_dir / "metrics.csv", "steps": trainer.step_count}


# ---------------------------------------------------------------------------
# Finite-difference gradient audit
# ---------------------------------------------------------------------------

def finite_difference_audit(model, decoder, batch: TrainBatch,
                            weights: LossWeights | None = None, n_samples=100,
                            eps=1e-5, seed=0):
    """Compare autograd gradients of the full phase-1 loss against central
    finite differences on randomly sampled parameters.

    The discriminator is copied once and held fixed, matching what the
    optimizer's gradient actually is at this step. Parameters are sampled with
    probability proportional to their element count across the classifier and
    decoder stores.

    The objective contains ReLU and L1 kinks; a probe whose +-eps interval
    straddles one measures the subgradient jump rather than the derivative.
    Such probes are detected by comparing difference quotients at shrinking
    scales (eps, eps/10, eps/100): at a smooth point consecutive estimates
    agree, while a straddled kink makes them disagree, in which case the
    finer scale is used. A genuine gradient bug is scale-independent and is
    not masked by this refinement. Relative error uses
    max(|analytic|, |numeric|) as the denominator; entries where both
    magnitudes are below 1e-6 count as agreement (beneath finite-difference
    resolution).

    Returns (max relative error, per-sample records).
    """
    weights = weights or LossWeights()
    model.train()
    decoder.train()
    disc = copy_discriminator(model)
    params = [p for p in list(model.parameters()) + list(decoder.parameters())
              if p.requires_grad]

    def total_loss():
        return phase1_losses(model, decoder, disc, batch, weights)["loss"]

    for p in params:
        p.grad = None
    total_loss().backward()
    grads = [torch.zeros_like(p) if p.grad is None else p.grad.clone() for p in params]

    sizes = np.array([p.numel() for p in params], dtype=np.float64)
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(params), size=n_samples, p=sizes / sizes.sum())
    records, max_rel = [], 0.0
    with torch.no_grad():
        for pi in picks:
            flat = params[pi].data.view(-1)
            fi = int(rng.integers(0, flat.numel()))
            orig = flat[fi].item()

            def quotient(h):
                flat[fi] = orig + h
                lp = float(total_loss())
                flat[fi] = orig - h
                lm = float(total_loss())
                flat[fi] = orig
                return (lp - lm) / (2.0 * h)

            fd = quotient(eps)
            for scale in (eps / 10.0, eps / 100.0):
                finer = quotient(scale)
                agree = max(abs(fd), abs(finer))
                if agree < 1e-6 or abs(fd - finer) / agree < 1e-3:
                    fd = finer
                    break
                fd = finer
            an = grads[pi].view(-1)[fi].item()
            denom = max(abs(an), abs(fd))
            rel = 0.0 if denom < 1e-6 else abs(an - fd) / denom
            max_rel = max(max_rel, rel)
            records.append({"param": int(pi), "index": fi, "analytic": an,
                            "numeric": fd, "rel_err": rel})
    return max_rel, records
