"""Shared fixtures: a tiny model configuration that keeps every forward pass
cheap, procedural phantom pairs, and a small on-disk phantom dataset."""

import numpy as np
import pytest
import torch

from asymmam import selfadv, synthlab
from asymmam.asyc import AsycConfig, AsycModel
from asymmam.asyd import UNetDecoder

# 16x8 images, /8 downsample -> a 2x1 token grid; small enough for
# finite-difference probing yet exercises every architectural piece.
TINY = dict(image_h=16, image_w=8, embed_dim=8, num_heads=2, num_blocks=1,
            stem_pool=False, stage_strides=(1, 2, 2, 1))


def tiny_config(**overrides):
    kw = dict(TINY)
    kw.update(overrides)
    return AsycConfig(**kw)


def make_phantom(seed, h=16, w=8, lesion_prob=0.5):
    cfg = synthlab.PhantomConfig(height=h, width=w, lesion_prob=lesion_prob)
    return synthlab.generate_phantom(np.random.SeedSequence((21, seed)), cfg)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_model(tiny_cfg):
    torch.manual_seed(0)
    return AsycModel(tiny_cfg)


@pytest.fixture
def tiny_decoder(tiny_cfg):
    torch.manual_seed(1)
    return UNetDecoder(tiny_cfg)


@pytest.fixture
def tiny_batch():
    pairs = [make_phantom(i) for i in range(4)]
    return selfadv.collate([(p, False, False) for p in pairs])


@pytest.fixture(scope="session")
def phantom_dataset(tmp_path_factory):
    """8-pair 32x16 phantom dataset on disk: {split: manifest path}."""
    out = tmp_path_factory.mktemp("phantom8")
    cfg = synthlab.PhantomConfig(height=32, width=16)
    return synthlab.write_phantom_dataset(out, 8, seed=77, config=cfg)
