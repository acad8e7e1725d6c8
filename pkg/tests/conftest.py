import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for the oracles module

from mmcb.codebook import init_codebook
from mmcb.config import ModelConfig
from mmcb.model import init_params


def tiny_config(**overrides):
    """Reduced configuration for gradient checks: d=32, 2 layers."""
    base = dict(d_model=32, heads=2, ffn_dim=48, enc_layers=2, dec_layers=2,
                vit_layers=2, vit_dim=16, vit_ffn_dim=24, vit_heads=2,
                patch_size=32, image_h=64, image_w=256, vocab_size=13,
                codebook_size=6, max_src_len=16, max_tgt_len=16)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture()
def tiny_params(tiny_cfg):
    return init_params(tiny_cfg, seed=0)


@pytest.fixture(scope="session")
def tiny_cb(tiny_cfg):
    return init_codebook(tiny_cfg.codebook_size, tiny_cfg.d_model, seed=0)


@pytest.fixture(scope="session")
def tiny_image(tiny_cfg):
    rng = np.random.default_rng(0)
    return (rng.random((tiny_cfg.image_h, tiny_cfg.image_w)) > 0.9).astype(np.float64)
