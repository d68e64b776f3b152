"""Flat key=value run configuration.

One dataclass holds every documented key with its default; files and command
line overrides ("key=value") are parsed against the field types, unknown keys
are rejected, and the effective config can be echoed back out as a file that
parses to an identical config.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

SIDE_POLICIES = ("right", "left", "both", "random")


@dataclass
class RunConfig:
    # data
    train_manifest: str = ""
    val_manifest: str = ""
    test_manifest: str = ""
    train_dataset: str = "train"
    image_h: int = 1024
    image_w: int = 512
    # model
    embed_dim: int = 512
    num_heads: int = 8
    num_blocks: int = 12
    head_hidden: int = 0
    encoder_stem_pool: bool = True
    encoder_stage_strides: str = "1,2,2,2"
    encoder_blocks_per_stage: int = 2
    use_transformer: bool = True
    use_cross_attention: bool = True
    # optimization
    batch_size: int = 8
    epochs: int = 50
    lr: float = 1e-4
    lr_decay: float = 0.1
    decay_epochs: int = 20
    grad_clip: float = 1.0    # max global gradient norm per store; 0 disables
    lambda_diag: float = 1.0
    lambda_rec: float = 0.1
    lambda_dics: float = 1.0
    lambda_syn: float = 0.5
    # synthesis
    synth_fraction: float = 0.5
    side_policy: str = "random"
    alpha_peak: float = 0.9
    alpha_mask_threshold: float = 0.25
    foreground_threshold: float = 0.05
    tumor_set: str = ""
    tumor_set_origin: str = "procedural"
    tumor_count: int = 16
    tumor_size_lo: int = 8
    tumor_size_hi: int = 20
    # augmentation
    augment: bool = True
    zoom_lo: float = 0.9
    zoom_hi: float = 1.1
    crop_fraction: float = 0.9
    # evaluation
    cam_threshold: float = 0.5
    bootstrap_resamples: int = 1000
    # run control
    seed: int = 0
    deterministic: bool = False

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.decay_epochs < 1:
            raise ConfigError(f"decay_epochs must be >= 1, got {self.decay_epochs}")
        if not (0.0 <= self.synth_fraction <= 1.0):
            raise ConfigError(f"synth_fraction must lie in [0, 1], got {self.synth_fraction}")
        if self.side_policy not in SIDE_POLICIES:
            raise ConfigError(f"side_policy must be one of {SIDE_POLICIES}, "
                              f"got {self.side_policy!r}")
        if not (0.0 < self.cam_threshold < 1.0):
            raise ConfigError(f"cam_threshold must lie in (0, 1), got {self.cam_threshold}")
        if not (0.0 < self.alpha_peak <= 1.0):
            raise ConfigError(f"alpha_peak must lie in (0, 1], got {self.alpha_peak}")
        if self.tumor_count < 1:
            raise ConfigError(f"tumor_count must be >= 1, got {self.tumor_count}")
        if not 4 <= self.tumor_size_lo <= self.tumor_size_hi:
            raise ConfigError(f"tumor sizes must satisfy 4 <= lo <= hi, got "
                              f"({self.tumor_size_lo}, {self.tumor_size_hi})")
        if self.bootstrap_resamples < 1000:
            raise ConfigError(f"bootstrap_resamples must be >= 1000, "
                              f"got {self.bootstrap_resamples}")
        if (self.tumor_set_origin and self.train_dataset
                and self.tumor_set_origin == self.train_dataset):
            raise ConfigError(
                f"tumor_set_origin must differ from train_dataset (both are "
                f"{self.train_dataset!r}): synthesis tumors must come from a "
                "different dataset than the training images")
        return self


def _resolve(annotation):
    if isinstance(annotation, str):
        return {"str": str, "int": int, "float": float, "bool": bool}[annotation]
    return annotation


_FIELD_TYPES = {f.name: _resolve(f.type) for f in dataclasses.fields(RunConfig)}


def _parse_value(raw, typ, key):
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"config key {key!r}: expected a boolean, got {raw!r}")
    if typ is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"config key {key!r}: expected an integer, got {raw!r}")
    if typ is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"config key {key!r}: expected a number, got {raw!r}")
    return raw


def _set_items(cfg: RunConfig, items) -> RunConfig:
    values = dataclasses.asdict(cfg)
    for key, raw in items:
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = (_parse_value(raw, _FIELD_TYPES[key], key)
                       if isinstance(raw, str) else raw)
    return RunConfig(**values)


def read_config(path, base: RunConfig | None = None) -> RunConfig:
    """Parse a key=value file ('#' starts a comment) over the defaults."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    items = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{line_no}: expected key=value, got {line!r}")
        key, raw = stripped.split("=", 1)
        items.append((key.strip(), raw))
    return _set_items(base or RunConfig(), items)


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply repeatable --set key=value strings."""
    items = []
    for ov in overrides or ():
        if "=" not in ov:
            raise ConfigError(f"--set expects key=value, got {ov!r}")
        key, raw = ov.split("=", 1)
        items.append((key.strip(), raw))
    return _set_items(cfg, items)


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def from_dict(values: dict) -> RunConfig:
    unknown = [k for k in values if k not in _FIELD_TYPES]
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    return RunConfig(**{**dataclasses.asdict(RunConfig()), **values})


def write_config(cfg: RunConfig, path) -> None:
    """Echo the effective config; the file parses back to an equal config."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for f in dataclasses.fields(RunConfig):
        v = getattr(cfg, f.name)
        if _FIELD_TYPES[f.name] is bool:
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def asyc_config(cfg: RunConfig):
    """Build the model architecture config from the run config."""
    from .asyc import AsycConfig
    try:
        strides = tuple(int(s) for s in cfg.encoder_stage_strides.split(","))
    except ValueError:
        raise ConfigError(f"encoder_stage_strides must be comma-separated integers, "
                          f"got {cfg.encoder_stage_strides!r}")
    return AsycConfig(image_h=cfg.image_h, image_w=cfg.image_w,
                      embed_dim=cfg.embed_dim, num_heads=cfg.num_heads,
                      num_blocks=cfg.num_blocks, head_hidden=cfg.head_hidden,
                      stem_pool=cfg.encoder_stem_pool, stage_strides=strides,
                      blocks_per_stage=cfg.encoder_blocks_per_stage,
                      use_transformer=cfg.use_transformer,
                      use_cross_attention=cfg.use_cross_attention)
