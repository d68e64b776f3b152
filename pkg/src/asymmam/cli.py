"""Command-line surface: train, eval, synthesize, phantom-gen, disentangle.

Every command takes --config (flat key=value file) plus repeatable
--set key=value overrides; --seed and --deterministic are shortcuts for the
matching config keys. Exit codes: 0 success, 2 configuration error, 3 runtime
error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import traceback
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .errors import AsymmamError, ConfigError


def _common_flags(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--deterministic", action="store_true",
                   help="64-bit deterministic numerics")
    p.add_argument("--out", help="output directory")


def _build_cfg(args) -> cfgmod.RunConfig:
    cfg = cfgmod.read_config(args.config) if args.config else cfgmod.RunConfig()
    cfg = cfgmod.apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.deterministic:
        cfg = dataclasses.replace(cfg, deterministic=True)
    return cfg


def cmd_train(args) -> int:
    from .selfadv import fit
    cfg = _build_cfg(args)
    info = fit(cfg, Path(args.out or "run"))
    print(f"run directory: {info['run_dir']}")
    print(f"steps: {info['steps']}")
    print(f"best checkpoint: {info['best_checkpoint']}"
          + (f" (val AUC {info['best_val_auc']:.4f})"
             if info["best_val_auc"] is not None else ""))
    return 0


def cmd_eval(args) -> int:
    from .evalkit import evaluate
    cfg = _build_cfg(args)
    if not Path(args.checkpoint).exists():
        raise ConfigError(f"checkpoint does not exist: {args.checkpoint}")
    if not Path(args.manifest).exists():
        raise ConfigError(f"manifest does not exist: {args.manifest}")
    report = evaluate(args.checkpoint, args.manifest, run_cfg=cfg,
                      out_dir=args.out, overlays=not args.no_overlays)
    for name in ("auc_abnormal", "auc_asymmetry", "mean_iou", "mean_ior",
                 "mean_dice", "mean_tiou", "mean_tior", "recon_win_rate"):
        v = getattr(report, name)
        if v is not None:
            print(f"{name}: {v:.4f}")
    if args.out:
        print(f"report written to {args.out}")
    return 0


def cmd_synthesize(args) -> int:
    from . import imgio, synthlab
    cfg = _build_cfg(args).validate()
    if not Path(args.manifest).exists():
        raise ConfigError(f"manifest does not exist: {args.manifest}")
    out_dir = Path(args.out or "synth_out")
    manifest = imgio.load_manifest(args.manifest)
    if cfg.tumor_set:
        tumor_set = synthlab.load_tumor_set(cfg.tumor_set)
    else:
        seed = int(np.random.SeedSequence((cfg.seed, 0xB10B)).generate_state(1)[0])
        tumor_set = synthlab.procedural_tumor_set(
            seed, origin_dataset=cfg.tumor_set_origin or "procedural")
    origin = tumor_set.origin_dataset or cfg.tumor_set_origin
    if origin and cfg.train_dataset and origin == cfg.train_dataset:
        raise ConfigError(f"tumor_set_origin {origin!r} must differ from "
                          f"train_dataset {cfg.train_dataset!r}")

    for sub in ("images", "masks", "clean"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    rows, skipped = [], 0
    for i, row in enumerate(manifest.rows):
        if row.y_asy != 0:
            skipped += 1
            continue
        pair = imgio.load_pair(row, manifest.root, cfg.image_h, cfg.image_w)
        seed = int(np.random.SeedSequence((cfg.seed, i)).generate_state(1)[0])
        rec = synthlab.synthesize_asymmetric(
            pair, tumor_set, seed, side_policy=cfg.side_policy,
            alpha_peak=cfg.alpha_peak, mask_threshold=cfg.alpha_mask_threshold,
            fg_threshold=cfg.foreground_threshold)
        fp = rec.fake_pair
        paths = {}
        for lat, short in (("right", "r"), ("left", "l")):
            img = getattr(fp, lat)
            raw = img.pixels if lat == "right" else img.pixels[:, ::-1]
            paths[f"{short}_img"] = f"images/{row.pair_id}_{short}.png"
            imgio.write_image(out_dir / paths[f"{short}_img"], raw)
            mask = getattr(fp, f"mask_{short}")
            if mask is not None:
                m = mask if lat == "right" else mask[:, ::-1]
                paths[f"{short}_mask"] = f"masks/{row.pair_id}_{short}.png"
                imgio.write_mask(out_dir / paths[f"{short}_mask"], m)
            real = getattr(fp, f"real_{lat}")
            if real is not None:
                rw = real if lat == "right" else real[:, ::-1]
                paths[f"{short}_real"] = f"clean/{row.pair_id}_{short}.png"
                imgio.write_image(out_dir / paths[f"{short}_real"], rw)
        rows.append(imgio.ManifestRow(
            pair_id=fp.pair_id, right_path=paths["r_img"], left_path=paths["l_img"],
            view=row.view, y_r=fp.y_r, y_l=fp.y_l, y_asy=fp.y_asy,
            mask_r_path=paths.get("r_mask"), mask_l_path=paths.get("l_mask"),
            real_r_path=paths.get("r_real"), real_l_path=paths.get("l_real")))
    imgio.write_manifest(imgio.Manifest(rows=rows, split="synth", root=out_dir),
                         out_dir / "synth.csv")
    print(f"synthesized {len(rows)} pairs into {out_dir} "
          f"({skipped} non-symmetric rows skipped)")
    return 0


def cmd_phantom_gen(args) -> int:
    from .synthlab import PhantomConfig, write_phantom_dataset
    if args.out is None:
        raise ConfigError("phantom-gen requires --out")
    pcfg = PhantomConfig(height=args.height, width=args.width,
                         noise=args.noise, lesion_prob=args.lesion_prob)
    paths = write_phantom_dataset(args.out, args.pairs, args.seed or 0, pcfg)
    for split, path in paths.items():
        print(f"{split}: {path}")
    return 0


def cmd_disentangle(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from . import imgio
    from .asyd import disentangle_pair
    from .selfadv import PairDataset, load_checkpoint

    if not Path(args.checkpoint).exists():
        raise ConfigError(f"checkpoint does not exist: {args.checkpoint}")
    if not Path(args.manifest).exists():
        raise ConfigError(f"manifest does not exist: {args.manifest}")
    out_dir = Path(args.out or "disentangled")
    out_dir.mkdir(parents=True, exist_ok=True)
    model, decoder, ckpt_cfg, _ = load_checkpoint(args.checkpoint)
    dataset = PairDataset(args.manifest, ckpt_cfg.image_h, ckpt_cfg.image_w)
    n = len(dataset) if args.limit is None else min(args.limit, len(dataset))
    for i in range(n):
        pair = dataset.get(i)
        d_r, d_l, out = disentangle_pair(model, decoder, pair)
        cams = {"right": out.cam_r[0].numpy(), "left": out.cam_l[0].numpy()}
        fig, axes = plt.subplots(2, 4, figsize=(9, 6))
        for rowi, (side, d, src) in enumerate((("right", d_r, pair.right),
                                               ("left", d_l, pair.left))):
            panels = ((src.pixels, "input"), (d.x_n.pixels, "x_n"),
                      (d.x_ab, "x_ab"), (src.pixels, "cam"))
            for coli, (img, title) in enumerate(panels):
                ax = axes[rowi][coli]
                ax.imshow(img, cmap="gray", vmin=0, vmax=1)
                if title == "cam":
                    ax.imshow(cams[side], cmap="jet", alpha=0.35, vmin=0, vmax=1)
                ax.set_title(f"{side} {title}", fontsize=8)
                ax.axis("off")
            imgio.write_image(out_dir / f"{pair.pair_id}_{side}_xn.png", d.x_n.pixels)
            imgio.write_image(out_dir / f"{pair.pair_id}_{side}_xab.png", d.x_ab)
        fig.suptitle(pair.pair_id, fontsize=10)
        fig.tight_layout()
        fig.savefig(out_dir / f"{pair.pair_id}_panel.png", dpi=100)
        plt.close(fig)
    print(f"wrote {n} disentangled pairs to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="asymmam",
        description="Bilateral-mammogram asymmetry training, synthesis, and "
                    "evaluation toolkit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train", help="train a model per the run config")
    _common_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    _common_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--no-overlays", action="store_true",
                   help="skip per-pair overlay PNGs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synthesize",
                       help="insert tumors into the symmetric pairs of a manifest")
    _common_flags(p)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("phantom-gen", help="generate a procedural phantom dataset")
    _common_flags(p)
    p.add_argument("--pairs", type=int, default=200)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--lesion-prob", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.002)
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("disentangle",
                       help="write (input, x_n, x_ab, CAM) panels per pair")
    _common_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--limit", type=int, default=None,
                   help="only process the first N pairs")
    p.set_defaults(func=cmd_disentangle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "func", None) is None:
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except AsymmamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception:
        traceback.print_exc()
        return 3


if __name__ == "__main__":
    sys.exit(main())
