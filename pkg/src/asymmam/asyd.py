"""Disentanglement decoder: maps the classifier's output features back to a
normal reconstruction x_n and an abnormality image x_ab per side.

A single U-Net-style decoder instance serves both sides. Skip connections come
from the shared encoder's intermediate maps; the final layer emits two sigmoid
channels, so x_ab is the abnormality's appearance on a dark background rather
than an additive residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import imgio
from .asyc import AsycConfig, AsycModel, AsycOutput, pair_tensors
from .errors import ShapeError


@dataclass
class DisentangledPair:
    """Normal reconstruction and abnormality image for one side."""

    x_n: imgio.GrayImage
    x_ab: np.ndarray
    side: str


def _level(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1, bias=False),
                         nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class UNetDecoder(nn.Module):
    """Upsample-and-concat decoder over the encoder's skip pyramid.

    Levels walk the skips from deepest (stage 3) to shallowest (stem output),
    bilinearly upsampling to each skip's resolution before fusing; a final
    upsample restores the full image size and a 1x1 conv emits the two sigmoid
    channels (x_n, x_ab).
    """

    MIN_WIDTH = 16  # reconstruction detail needs headroom at fine levels

    def __init__(self, cfg: AsycConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.stage_channels()
        skip_chans = [chans[0], chans[0], chans[1], chans[2]]  # stem, s1, s2, s3
        levels = []
        cin = cfg.embed_dim
        for sc in reversed(skip_chans):
            cout = max(sc, self.MIN_WIDTH)
            levels.append(_level(cin + sc, cout))
            cin = cout
        self.levels = nn.ModuleList(levels)
        self.final = _level(cin, cin)
        self.head = nn.Conv2d(cin, 2, kernel_size=1)

    def forward(self, f_out, skips):
        """f_out: (B, C, H', W'); skips: [stem, s1, s2, s3] with matching batch.

        Returns (x_n, x_ab), each (B, H, W) in (0, 1).
        """
        if len(skips) != len(self.levels):
            raise ShapeError(f"expected {len(self.levels)} skip maps, got {len(skips)}")
        cur = f_out
        for level, skip in zip(self.levels, reversed(skips)):
            if skip.shape[0] != cur.shape[0]:
                raise ShapeError("skip batch size does not match decoder input")
            if cur.shape[-2:] != skip.shape[-2:]:
                cur = F.interpolate(cur, size=skip.shape[-2:], mode="bilinear",
                                    align_corners=False)
            cur = level(torch.cat([cur, skip], dim=1))
        cur = F.interpolate(cur, size=(self.cfg.image_h, self.cfg.image_w),
                            mode="bilinear", align_corners=False)
        two = torch.sigmoid(self.head(self.final(cur)))
        return two[:, 0], two[:, 1]


def decode_pair_features(decoder: UNetDecoder, out: AsycOutput, skips):
    """Decode both sides in one concatenated batch; returns per-side tensors.

    skips must be the concatenated-layout list from forward_features.
    """
    f_cat = torch.cat([out.f_out_r, out.f_out_l], dim=0)
    x_n, x_ab = decoder(f_cat, skips)
    x_n_r, x_n_l = x_n.chunk(2, dim=0)
    x_ab_r, x_ab_l = x_ab.chunk(2, dim=0)
    return x_n_r, x_n_l, x_ab_r, x_ab_l


def disentangle_pair(model: AsycModel, decoder: UNetDecoder,
                     pair: imgio.BilateralPair, device="cpu",
                     dtype=torch.float32):
    """Inference-mode disentanglement of one pair.

    Returns (DisentangledPair right, DisentangledPair left, AsycOutput).
    """
    model.eval()
    decoder.eval()
    with torch.no_grad():
        x_r, x_l = pair_tensors(pair, dtype=dtype, device=device)
        out, skips = model.forward_features(x_r, x_l)
        x_n_r, x_n_l, x_ab_r, x_ab_l = decode_pair_features(decoder, out, skips)

    def pack(x_n, x_ab, src, side):
        img = imgio.GrayImage(x_n[0].cpu().numpy().astype(np.float64),
                              laterality=side, view=src.view)
        return DisentangledPair(x_n=img, x_ab=x_ab[0].cpu().numpy().astype(np.float64),
                                side=side)

    return (pack(x_n_r, x_ab_r, pair.right, "right"),
            pack(x_n_l, x_ab_l, pair.left, "left"),
            out)
