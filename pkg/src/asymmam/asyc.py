"""Bilateral classifier: shared residual encoder, paired self/cross-attention
blocks, per-side abnormality heads, an abs-difference asymmetry head, and
online CAM generation.

Both sides run through a single parameter store, so the whole network is
equivariant under swapping right and left. Each transformer block applies one
shared multi-head attention module twice per side -- once with its own
keys/values (self-attention) and once with the contralateral side's
(cross-attention) -- then fuses (input, SA, CA) back to the input width with a
1x1 convolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError


@dataclass
class AsycConfig:
    image_h: int = 1024
    image_w: int = 512
    embed_dim: int = 512
    num_heads: int = 8
    num_blocks: int = 12
    head_hidden: int = 0          # attention q/k/v projection width; 0 = embed_dim
    stem_pool: bool = True
    stage_strides: tuple = (1, 2, 2, 2)
    blocks_per_stage: int = 2
    use_transformer: bool = True
    use_cross_attention: bool = True

    def __post_init__(self):
        self.stage_strides = tuple(int(s) for s in self.stage_strides)
        if self.embed_dim < 8 or self.embed_dim % 8:
            raise ConfigError(f"embed_dim must be a multiple of 8, got {self.embed_dim}")
        if self.num_heads < 1 or self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by "
                              f"num_heads {self.num_heads}")
        if self.num_blocks < 1:
            raise ConfigError(f"num_blocks must be >= 1, got {self.num_blocks}")
        if len(self.stage_strides) != 4 or any(s not in (1, 2) for s in self.stage_strides):
            raise ConfigError(f"stage_strides must be four values in {{1,2}}, "
                              f"got {self.stage_strides}")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")
        d = self.downsample
        if self.image_h % d or self.image_w % d:
            raise ConfigError(f"image size {self.image_h}x{self.image_w} must be "
                              f"divisible by the encoder downsample factor {d}")

    @property
    def downsample(self) -> int:
        d = 2 * (2 if self.stem_pool else 1)
        for s in self.stage_strides:
            d *= s
        return d

    @property
    def proj_dim(self) -> int:
        return self.head_hidden if self.head_hidden > 0 else self.embed_dim

    def feature_hw(self):
        return self.image_h // self.downsample, self.image_w // self.downsample

    def stage_channels(self):
        c = self.embed_dim
        return [c // 8, c // 4, c // 2, c]


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False),
                                      nn.BatchNorm2d(cout))

    def forward(self, x):
        idn = x if self.down is None else self.down(x)
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(y + idn)


class ResidualEncoder(nn.Module):
    """Residual convolutional backbone (18 weighted layers at the defaults).

    forward returns the deepest feature map plus the intermediate maps
    (stem output and the first three stage outputs) used as decoder skips.
    """

    def __init__(self, cfg: AsycConfig):
        super().__init__()
        chans = cfg.stage_channels()
        self.stem = nn.Sequential(
            nn.Conv2d(1, chans[0], 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(chans[0]), nn.ReLU(inplace=True))
        self.pool = nn.MaxPool2d(3, stride=2, padding=1) if cfg.stem_pool else None
        stages = []
        cin = chans[0]
        for cout, stride in zip(chans, cfg.stage_strides):
            blocks = [BasicBlock(cin, cout, stride)]
            blocks += [BasicBlock(cout, cout, 1) for _ in range(cfg.blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            cin = cout
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        s0 = self.stem(x)
        h = self.pool(s0) if self.pool is not None else s0
        skips = [s0]
        for stage in self.stages:
            h = stage(h)
            skips.append(h)
        return h, skips[:-1]  # deepest map, then [stem, stage1, stage2, stage3]


class MultiHeadAttention(nn.Module):
    """Standard multi-head scaled dot-product attention over spatial tokens."""

    def __init__(self, embed_dim, num_heads, proj_dim=None):
        super().__init__()
        proj_dim = proj_dim or embed_dim
        if proj_dim % num_heads:
            raise ConfigError(f"attention width {proj_dim} not divisible by "
                              f"{num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = proj_dim // num_heads
        self.q = nn.Linear(embed_dim, proj_dim)
        self.k = nn.Linear(embed_dim, proj_dim)
        self.v = nn.Linear(embed_dim, proj_dim)
        self.out = nn.Linear(proj_dim, embed_dim)

    def forward(self, q_src, kv_src, return_weights=False):
        # q_src, kv_src: (B, T, C)
        b, tq, _ = q_src.shape
        tk = kv_src.shape[1]
        h, d = self.num_heads, self.head_dim
        q = self.q(q_src).view(b, tq, h, d).transpose(1, 2)
        k = self.k(kv_src).view(b, tk, h, d).transpose(1, 2)
        v = self.v(kv_src).view(b, tk, h, d).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, tq, h * d)
        out = self.out(out)
        return (out, attn) if return_weights else (out, None)


def to_tokens(f):
    """(B, C, H, W) -> (B, H*W, C)"""
    return f.flatten(2).transpose(1, 2)


def to_map(tokens, h, w):
    """(B, T, C) -> (B, C, h, w)"""
    return tokens.transpose(1, 2).reshape(tokens.shape[0], -1, h, w)


class AsyBlock(nn.Module):
    """One paired transformer block: SA and CA in parallel, 1x1-conv fusion.

    The same attention module serves both the self and the cross path, and the
    same block weights serve both sides, so swapping the two inputs swaps the
    two outputs exactly.
    """

    def __init__(self, embed_dim, num_heads, proj_dim, use_cross_attention=True):
        super().__init__()
        self.mha = MultiHeadAttention(embed_dim, num_heads, proj_dim)
        self.fuse = nn.Conv2d(3 * embed_dim, embed_dim, kernel_size=1)
        self.use_cross_attention = use_cross_attention

    def forward(self, f_r, f_l, return_weights=False):
        if f_r.shape != f_l.shape:
            raise ShapeError(f"side shapes differ: {tuple(f_r.shape)} vs {tuple(f_l.shape)}")
        _, _, hp, wp = f_r.shape
        t_r, t_l = to_tokens(f_r), to_tokens(f_l)
        sa_r, w_sa_r = self.mha(t_r, t_r, return_weights)
        sa_l, w_sa_l = self.mha(t_l, t_l, return_weights)
        if self.use_cross_attention:
            ca_r, w_ca_r = self.mha(t_r, t_l, return_weights)
            ca_l, w_ca_l = self.mha(t_l, t_r, return_weights)
        else:
            ca_r, ca_l = torch.zeros_like(sa_r), torch.zeros_like(sa_l)
            w_ca_r = w_ca_l = None
        out_r = self.fuse(torch.cat([f_r, to_map(sa_r, hp, wp), to_map(ca_r, hp, wp)], 1))
        out_l = self.fuse(torch.cat([f_l, to_map(sa_l, hp, wp), to_map(ca_l, hp, wp)], 1))
        weights = None
        if return_weights:
            weights = {"sa_r": w_sa_r, "sa_l": w_sa_l, "ca_r": w_ca_r, "ca_l": w_ca_l}
        return out_r, out_l, weights


@dataclass
class AsycOutput:
    """Per-side logits/probabilities, the asymmetry score, CAMs, and features."""

    logit_r: torch.Tensor
    logit_l: torch.Tensor
    logit_asy: torch.Tensor
    p_r: torch.Tensor
    p_l: torch.Tensor
    p_asy: torch.Tensor
    cam_r: torch.Tensor       # (B, H, W) in [0, 1]
    cam_l: torch.Tensor
    f_out_r: torch.Tensor     # (B, C, H', W')
    f_out_l: torch.Tensor
    attention: list | None = None


class AsycModel(nn.Module):
    def __init__(self, cfg: AsycConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ResidualEncoder(cfg)
        if cfg.use_transformer:
            hp, wp = cfg.feature_hw()
            self.pos = nn.Parameter(torch.zeros(1, cfg.embed_dim, hp, wp))
            nn.init.normal_(self.pos, std=0.02)
            self.blocks = nn.ModuleList(
                AsyBlock(cfg.embed_dim, cfg.num_heads, cfg.proj_dim,
                         cfg.use_cross_attention)
                for _ in range(cfg.num_blocks))
        else:
            self.blocks = nn.ModuleList()
        self.abnormal_head = nn.Linear(cfg.embed_dim, 1)
        self.asymmetry_head = nn.Linear(cfg.embed_dim, 1)
        # start both heads at a confident "normal/symmetric" prior so the
        # untrained network scores near-zero probabilities; detection heads
        # initialized at the negative prior train more stably than at 0.5
        nn.init.constant_(self.abnormal_head.bias, -3.0)
        nn.init.constant_(self.asymmetry_head.bias, -3.0)

    # -- pieces -------------------------------------------------------------

    def _check_input(self, x):
        cfg = self.cfg
        if x.dim() != 4 or x.shape[1] != 1 or x.shape[2:] != (cfg.image_h, cfg.image_w):
            raise ShapeError(f"expected (B, 1, {cfg.image_h}, {cfg.image_w}) input, "
                             f"got {tuple(x.shape)}")

    def transform(self, f_r, f_l, return_attention=False):
        """Run the paired block stack; identity when the transformer is disabled."""
        if not self.cfg.use_transformer:
            return f_r, f_l, None
        f_r = f_r + self.pos
        f_l = f_l + self.pos
        collected = [] if return_attention else None
        for block in self.blocks:
            f_r, f_l, w = block(f_r, f_l, return_weights=return_attention)
            if return_attention:
                collected.append(w)
        return f_r, f_l, collected

    def classify_abnormal(self, f_out):
        """Global average pool -> shared linear head; returns (probability, logit)."""
        logit = self.abnormal_head(f_out.mean(dim=(2, 3))).squeeze(-1)
        return torch.sigmoid(logit), logit

    def classify_asymmetry(self, f_out_r, f_out_l):
        """Abs-difference of the side features -> pool -> linear head."""
        diff = (f_out_r - f_out_l).abs().mean(dim=(2, 3))
        logit = self.asymmetry_head(diff).squeeze(-1)
        return torch.sigmoid(logit), logit

    def compute_cam(self, f_out, target_size=None):
        """Head-weighted channel sum -> ReLU -> upsample -> per-image min-max.

        Constant maps (e.g. all activations off) normalize to all zeros. The
        head weights are used at their current values, so the map tracks
        training online and gradients flow through it.
        """
        if target_size is None:
            target_size = (self.cfg.image_h, self.cfg.image_w)
        w = self.abnormal_head.weight.view(1, -1, 1, 1)
        raw = F.relu((f_out * w).sum(dim=1, keepdim=True))
        up = F.interpolate(raw, size=target_size, mode="bilinear",
                           align_corners=False).squeeze(1)
        flat = up.flatten(1)
        lo = flat.min(dim=1).values.view(-1, 1, 1)
        hi = flat.max(dim=1).values.view(-1, 1, 1)
        span = hi - lo
        norm = (up - lo) / span.clamp_min(1e-12)
        return torch.where(span > 1e-12, norm, torch.zeros_like(up))

    # -- full forward -------------------------------------------------------

    def forward_features(self, x_r, x_l, return_attention=False):
        """Full forward that also returns the encoder skips for the decoder.

        The two sides are concatenated into one batch for the encoder so batch
        normalization sees a side-symmetric batch; the returned skip tensors
        keep that concatenated layout (right half first).
        """
        self._check_input(x_r)
        self._check_input(x_l)
        f, skips = self.encoder(torch.cat([x_r, x_l], dim=0))
        f_r, f_l = f.chunk(2, dim=0)
        f_out_r, f_out_l, attn = self.transform(f_r, f_l, return_attention)
        p_r, logit_r = self.classify_abnormal(f_out_r)
        p_l, logit_l = self.classify_abnormal(f_out_l)
        p_asy, logit_asy = self.classify_asymmetry(f_out_r, f_out_l)
        cams = self.compute_cam(torch.cat([f_out_r, f_out_l], dim=0))
        cam_r, cam_l = cams.chunk(2, dim=0)
        out = AsycOutput(logit_r=logit_r, logit_l=logit_l, logit_asy=logit_asy,
                         p_r=p_r, p_l=p_l, p_asy=p_asy, cam_r=cam_r, cam_l=cam_l,
                         f_out_r=f_out_r, f_out_l=f_out_l, attention=attn)
        return out, skips

    def forward(self, x_r, x_l, return_attention=False) -> AsycOutput:
        out, _ = self.forward_features(x_r, x_l, return_attention)
        return out


def pair_tensors(pair, dtype=torch.float32, device="cpu"):
    """BilateralPair -> ((1,1,H,W) right, (1,1,H,W) left) tensors."""
    def conv(img):
        t = torch.from_numpy(img.pixels.copy())
        return t.to(dtype=dtype, device=device).unsqueeze(0).unsqueeze(0)
    return conv(pair.right), conv(pair.left)
