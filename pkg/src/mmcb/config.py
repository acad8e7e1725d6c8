"""Dataclass configuration for the model and the four training stages."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import ShapeError


@dataclass
class ModelConfig:
    d_model: int = 512
    heads: int = 8
    ffn_dim: int = 2048
    enc_layers: int = 6
    dec_layers: int = 6
    vit_layers: int = 4
    vit_dim: int = 128
    vit_ffn_dim: int = 512
    vit_heads: int = 4
    patch_size: int = 8
    image_h: int = 64
    image_w: int = 256
    vocab_size: int = 0          # filled from the vocab file
    codebook_size: int = 2048
    max_src_len: int = 64
    max_tgt_len: int = 64
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ShapeError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if self.vit_dim % self.vit_heads:
            raise ShapeError(f"vit_dim {self.vit_dim} not divisible by {self.vit_heads} heads")
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ShapeError(f"image {self.image_h}x{self.image_w} not divisible by "
                             f"patch size {self.patch_size}")
        if self.codebook_size < 1:
            raise ShapeError("codebook_size must be >= 1")

    @property
    def n_patches(self) -> int:
        return (self.image_h // self.patch_size) * (self.image_w // self.patch_size)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def desk(cls, vocab_size: int = 0, **overrides) -> "ModelConfig":
        """Small configuration for CPU-sized runs and tests."""
        base = dict(d_model=64, heads=4, ffn_dim=128, enc_layers=2, dec_layers=2,
                    vit_layers=2, vit_dim=48, vit_ffn_dim=96, vit_heads=4,
                    patch_size=16, codebook_size=64, max_src_len=48, max_tgt_len=48,
                    vocab_size=vocab_size)
        base.update(overrides)
        return cls(**base)


# default loss weights: stage 3 uses alpha=0.25; stage 4 alpha=0.75, beta=0.25
STAGE_DEFAULTS = {
    1: dict(alpha=0.0, beta=0.0, dropout=0.1, batch_tokens=32768),
    2: dict(alpha=0.0, beta=0.0, dropout=0.1, batch_tokens=32768),
    3: dict(alpha=0.25, beta=0.0, dropout=0.1, batch_tokens=4096),
    4: dict(alpha=0.75, beta=0.25, dropout=0.3, batch_tokens=4096),
}


@dataclass
class StageConfig:
    stage: int
    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.99
    dropout: float = 0.1
    batch_tokens: int = 4096
    max_steps: int = 1000
    eval_every: int = 100
    patience: int = 5
    warmup: int = 400
    seed: int = 0
    label_smoothing: float = 0.1
    clip_norm: float = 1.0
    # stage 3 trains the patch backbone by default; stage 4 always freezes it
    train_backbone: bool = True
    # straight-through gradients through the quantizer on the decoder path
    straight_through: bool = True
    # which text feeds the codebook EMA in stage 4: ground-truth only by default
    ema_source: str = "gt"
    # ablation wiring
    use_codebook: bool = True
    random_code_sampling: bool = False
    include_l3_in_stage4: bool = True
    allow_stage2_lineage: bool = False

    def __post_init__(self):
        if self.stage not in (1, 2, 3, 4):
            raise ShapeError(f"unknown stage {self.stage}")
        if self.alpha < 0 or self.beta < 0:
            raise ShapeError("alpha and beta must be >= 0")
        if not (0.0 < self.gamma < 1.0):
            raise ShapeError(f"gamma {self.gamma} outside (0, 1)")
        if self.ema_source not in ("gt", "ocr", "both"):
            raise ShapeError(f"bad ema_source {self.ema_source!r}")

    @classmethod
    def for_stage(cls, stage: int, **overrides) -> "StageConfig":
        kw = dict(STAGE_DEFAULTS[stage])
        kw.update(overrides)
        return cls(stage=stage, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        return cls(**d)
