"""The four networks: post-norm transformer text encoder, pre-norm patch
transformer feeding a text-query cross-attention image encoder, transformer
decoder over the concatenation of text states and quantized visual codes, and
the softmax output head.

Sequences are processed one example at a time as unpadded 2-D tensors, so
there are no padding masks; batching happens by gradient accumulation in the
pipeline.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .codebook import CodebookState, QuantizationResult, quantize_st, random_codes
from .config import ModelConfig
from .errors import ShapeError
from .substrate import (
    Context,
    Tensor,
    add,
    causal_mask,
    concat_rows,
    dropout,
    embedding,
    label_smoothed_ce,
    layer_norm,
    linear,
    multi_head_attention,
    relu,
    scale,
    softmax_rows,
)

GROUPS = ("embed", "te", "td", "ie", "vit", "head")


class ParamSet:
    """Named parameter tensors partitioned into the six groups above.

    The group is the first dotted component of the name; every parameter
    belongs to exactly one group, which the tests assert by byte accounting.
    """

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors
        for name in tensors:
            if self.group_of(name) not in GROUPS:
                raise ShapeError(f"parameter {name} outside known groups")

    @staticmethod
    def group_of(name: str) -> str:
        return name.split(".", 1)[0]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self, group: Optional[str] = None) -> list[str]:
        if group is None:
            return list(self.tensors)
        return [n for n in self.tensors if self.group_of(n) == group]

    def set_trainable(self, groups) -> None:
        groups = set(groups)
        for name, t in self.tensors.items():
            t.requires_grad = self.group_of(name) in groups
            t.grad = None

    def trainable_names(self) -> list[str]:
        return [n for n, t in self.tensors.items() if t.requires_grad]

    def group_trainable(self, group: str) -> bool:
        return any(t.requires_grad for n, t in self.tensors.items()
                   if self.group_of(n) == group)

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def collect_grads(self) -> dict[str, np.ndarray]:
        return {n: t.grad for n, t in self.tensors.items()
                if t.requires_grad and t.grad is not None}

    def data(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def nbytes(self, group: Optional[str] = None) -> int:
        return sum(self.tensors[n].data.nbytes for n in self.names(group))

    def copy(self) -> "ParamSet":
        return ParamSet({n: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                         for n, t in self.tensors.items()})


def _xavier(rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(cfg: ModelConfig, seed: int) -> ParamSet:
    """Xavier-uniform matrices, zero biases, N(0, d**-0.5) embeddings."""
    if cfg.vocab_size < 5:
        raise ShapeError(f"vocab_size {cfg.vocab_size} too small (reserved ids)")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x9A7A])))
    d, dv = cfg.d_model, cfg.vit_dim
    p: dict[str, Tensor] = {}

    def mat(name, fi, fo):
        p[name] = Tensor(_xavier(rng, fi, fo))

    def bias(name, n):
        p[name] = Tensor(np.zeros((1, n)))

    def emb(name, rows, dim):
        p[name] = Tensor(rng.normal(0.0, dim ** -0.5, size=(rows, dim)))

    def ln(prefix, dim):
        p[f"{prefix}.g"] = Tensor(np.ones((1, dim)))
        p[f"{prefix}.b"] = Tensor(np.zeros((1, dim)))

    def attn(prefix, dim):
        for w in ("wq", "wk", "wv", "wo"):
            mat(f"{prefix}.{w}", dim, dim)
        for b in ("bq", "bk", "bv", "bo"):
            bias(f"{prefix}.{b}", dim)

    def ffn(prefix, dim, hidden):
        mat(f"{prefix}.w1", dim, hidden)
        bias(f"{prefix}.b1", hidden)
        mat(f"{prefix}.w2", hidden, dim)
        bias(f"{prefix}.b2", dim)

    emb("embed.tok", cfg.vocab_size, d)
    emb("te.pos", cfg.max_src_len, d)
    for i in range(cfg.enc_layers):
        attn(f"te.{i}.attn", d)
        ln(f"te.{i}.ln1", d)
        ffn(f"te.{i}.ffn", d, cfg.ffn_dim)
        ln(f"te.{i}.ln2", d)

    emb("td.pos", cfg.max_tgt_len + 1, d)
    for i in range(cfg.dec_layers):
        attn(f"td.{i}.self", d)
        ln(f"td.{i}.ln1", d)
        attn(f"td.{i}.cross", d)
        ln(f"td.{i}.ln2", d)
        ffn(f"td.{i}.ffn", d, cfg.ffn_dim)
        ln(f"td.{i}.ln3", d)

    patch_dim = cfg.patch_size * cfg.patch_size
    mat("vit.proj.w", patch_dim, dv)
    bias("vit.proj.b", dv)
    emb("vit.pos", cfg.n_patches, dv)
    for i in range(cfg.vit_layers):
        ln(f"vit.{i}.ln1", dv)
        attn(f"vit.{i}.attn", dv)
        ln(f"vit.{i}.ln2", dv)
        ffn(f"vit.{i}.ffn", dv, cfg.vit_ffn_dim)
    ln("vit.lnf", dv)

    mat("ie.wv", dv, d)
    bias("ie.wv_b", d)
    attn("ie.fuse", d)

    mat("head.w", d, cfg.vocab_size)
    bias("head.b", cfg.vocab_size)
    return ParamSet(p)


# ---------------------------------------------------------------------------
# encoders


@dataclass
class EncodedText:
    states: Tensor          # (N, d) final-layer hidden states
    tokens: np.ndarray      # the ids that produced them


def _mha_block(ctx, prefix, params, q, k, v, cfg_heads, mask=None):
    g = params.tensors
    return multi_head_attention(
        ctx, q, k, v,
        g[f"{prefix}.wq"], g[f"{prefix}.wk"], g[f"{prefix}.wv"], g[f"{prefix}.wo"],
        g[f"{prefix}.bq"], g[f"{prefix}.bk"], g[f"{prefix}.bv"], g[f"{prefix}.bo"],
        heads=cfg_heads, mask=mask)


def _ffn_block(ctx, prefix, params, x):
    g = params.tensors
    h = relu(ctx, linear(ctx, x, g[f"{prefix}.w1"], g[f"{prefix}.b1"]))
    return linear(ctx, h, g[f"{prefix}.w2"], g[f"{prefix}.b2"])


def encode_text(ctx: Context, tokens: np.ndarray, params: ParamSet,
                cfg: ModelConfig, drop: float = 0.0) -> EncodedText:
    """Post-norm transformer stack over token + learned position embeddings."""
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.shape[0]
    if n == 0:
        raise ShapeError("encode_text: empty token sequence")
    if n > cfg.max_src_len:
        raise ShapeError(f"encode_text: length {n} exceeds max {cfg.max_src_len}")
    g = params.tensors
    h = scale(ctx, embedding(ctx, g["embed.tok"], tokens), math.sqrt(cfg.d_model))
    h = add(ctx, h, embedding(ctx, g["te.pos"], np.arange(n)))
    h = dropout(ctx, h, drop)
    for i in range(cfg.enc_layers):
        a = _mha_block(ctx, f"te.{i}.attn", params, h, h, h, cfg.heads)
        h = layer_norm(ctx, add(ctx, h, dropout(ctx, a, drop)),
                       g[f"te.{i}.ln1.g"], g[f"te.{i}.ln1.b"])
        f = _ffn_block(ctx, f"te.{i}.ffn", params, h)
        h = layer_norm(ctx, add(ctx, h, dropout(ctx, f, drop)),
                       g[f"te.{i}.ln2.g"], g[f"te.{i}.ln2.b"])
    return EncodedText(states=h, tokens=tokens)


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """(H, W) grid -> (n_patches, patch*patch) rows, patches in row-major order."""
    hh, ww = image.shape
    if hh % patch or ww % patch:
        raise ShapeError(f"patchify: image {image.shape} not divisible by {patch}")
    rows = image.reshape(hh // patch, patch, ww // patch, patch)
    return rows.transpose(0, 2, 1, 3).reshape(-1, patch * patch)


def encode_patches(ctx: Context, image: np.ndarray, params: ParamSet,
                   cfg: ModelConfig, drop: float = 0.0) -> Tensor:
    """Pre-norm patch transformer (CLS-free, learned positions, final LN)."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (cfg.image_h, cfg.image_w):
        raise ShapeError(f"encode_patches: image {image.shape} vs "
                         f"({cfg.image_h}, {cfg.image_w})")
    g = params.tensors
    x = Tensor(patchify(image, cfg.patch_size))
    h = linear(ctx, x, g["vit.proj.w"], g["vit.proj.b"])
    h = add(ctx, h, embedding(ctx, g["vit.pos"], np.arange(cfg.n_patches)))
    h = dropout(ctx, h, drop)
    for i in range(cfg.vit_layers):
        a = layer_norm(ctx, h, g[f"vit.{i}.ln1.g"], g[f"vit.{i}.ln1.b"])
        a = _mha_block(ctx, f"vit.{i}.attn", params, a, a, a, cfg.vit_heads)
        h = add(ctx, h, dropout(ctx, a, drop))
        f = layer_norm(ctx, h, g[f"vit.{i}.ln2.g"], g[f"vit.{i}.ln2.b"])
        f = _ffn_block(ctx, f"vit.{i}.ffn", params, f)
        h = add(ctx, h, dropout(ctx, f, drop))
    return layer_norm(ctx, h, g["vit.lnf.g"], g["vit.lnf.b"])


def encode_image(ctx: Context, image: np.ndarray, text_query: EncodedText,
                 params: ParamSet, cfg: ModelConfig, drop: float = 0.0,
                 backbone_trainable: bool = True) -> Tensor:
    """Project patch features to model width and cross-attend with the text
    states as queries; output has one row per query row.

    A frozen backbone runs off-tape in eval mode (its features are constants).
    """
    if text_query.states.rows == 0:
        raise ShapeError("encode_image: empty text query")
    if backbone_trainable:
        feats = encode_patches(ctx, image, params, cfg, drop)
    else:
        feats = Tensor(encode_patches(Context.inference(), image, params, cfg).data)
    g = params.tensors
    mem = linear(ctx, feats, g["ie.wv"], g["ie.wv_b"])
    return _mha_block(ctx, "ie.fuse", params, text_query.states, mem, mem, cfg.heads)


# ---------------------------------------------------------------------------
# decoder and losses


def decode_states(ctx: Context, dec_input: np.ndarray, enc: EncodedText,
                  visual: Optional[Tensor], params: ParamSet, cfg: ModelConfig,
                  drop: float = 0.0) -> Tensor:
    n = dec_input.shape[0]
    if n > cfg.max_tgt_len + 1:
        raise ShapeError(f"decode: length {n} exceeds max {cfg.max_tgt_len + 1}")
    if enc.states.rows == 0:
        raise ShapeError("decode: empty cross-attention memory")
    g = params.tensors
    memory = enc.states if visual is None else concat_rows(ctx, enc.states, visual)
    h = scale(ctx, embedding(ctx, g["embed.tok"], dec_input), math.sqrt(cfg.d_model))
    h = add(ctx, h, embedding(ctx, g["td.pos"], np.arange(n)))
    h = dropout(ctx, h, drop)
    cmask = causal_mask(n)
    for i in range(cfg.dec_layers):
        a = _mha_block(ctx, f"td.{i}.self", params, h, h, h, cfg.heads, mask=cmask)
        h = layer_norm(ctx, add(ctx, h, dropout(ctx, a, drop)),
                       g[f"td.{i}.ln1.g"], g[f"td.{i}.ln1.b"])
        a = _mha_block(ctx, f"td.{i}.cross", params, h, memory, memory, cfg.heads)
        h = layer_norm(ctx, add(ctx, h, dropout(ctx, a, drop)),
                       g[f"td.{i}.ln2.g"], g[f"td.{i}.ln2.b"])
        f = _ffn_block(ctx, f"td.{i}.ffn", params, h)
        h = layer_norm(ctx, add(ctx, h, dropout(ctx, f, drop)),
                       g[f"td.{i}.ln3.g"], g[f"td.{i}.ln3.b"])
    return h


def decode_logits(ctx: Context, dec_input: np.ndarray, enc: EncodedText,
                  visual: Optional[Tensor], params: ParamSet, cfg: ModelConfig,
                  drop: float = 0.0) -> Tensor:
    h = decode_states(ctx, dec_input, enc, visual, params, cfg, drop)
    return linear(ctx, h, params["head.w"], params["head.b"])


def decode(ctx: Context, dec_input: np.ndarray, enc: EncodedText,
           visual: Optional[Tensor], params: ParamSet, cfg: ModelConfig,
           drop: float = 0.0) -> Tensor:
    """Per-position next-token distributions; rows sum to 1."""
    return softmax_rows(ctx, decode_logits(ctx, dec_input, enc, visual, params, cfg, drop))


BOS, EOS = 1, 2  # mirror of data.vocab reserved ids, kept here to avoid a cycle


def seq_loss(ctx: Context, enc: EncodedText, visual: Optional[Tensor],
             tgt: np.ndarray, params: ParamSet, cfg: ModelConfig,
             drop: float, label_smoothing: float) -> Tensor:
    tgt = np.asarray(tgt, dtype=np.int64)
    dec_input = np.concatenate([[BOS], tgt])
    targets = np.concatenate([tgt, [EOS]])
    logits = decode_logits(ctx, dec_input, enc, visual, params, cfg, drop)
    return label_smoothed_ce(ctx, logits, targets, label_smoothing)


def text_only_forward(ctx: Context, src: np.ndarray, tgt: np.ndarray,
                      params: ParamSet, cfg: ModelConfig, drop: float = 0.0,
                      label_smoothing: float = 0.1) -> Tensor:
    """Plain seq2seq objective; no image path. Doubles as the text-only
    baseline configuration."""
    enc = encode_text(ctx, src, params, cfg, drop)
    return seq_loss(ctx, enc, None, tgt, params, cfg, drop, label_smoothing)


def visual_codes(ctx: Context, h_v: Tensor, cb: Optional[CodebookState],
                 visual_mode: str, straight_through_on: bool = True,
                 sample_seed: int = 0, st_key=None) -> tuple[Optional[Tensor], Optional[QuantizationResult]]:
    """The decoder-side visual memory under one of the wiring variants:
    quantized codes ("codes"), raw states ("raw", codebook ablated), uniform
    samples ("random"), or nothing ("off")."""
    if visual_mode == "off":
        return None, None
    if visual_mode == "raw":
        return h_v, None
    if visual_mode == "random":
        res = random_codes(cb, h_v.rows, seed=sample_seed)
        return Tensor(res.codes), res
    if visual_mode == "codes":
        codes, res = quantize_st(ctx, h_v, cb, key=st_key,
                                 straight_through_on=straight_through_on)
        return codes, res
    raise ShapeError(f"unknown visual_mode {visual_mode!r}")


def forward_tit(ctx: Context, image: np.ndarray, ocr_tokens: np.ndarray,
                tgt: np.ndarray, params: ParamSet, cfg: ModelConfig,
                cb: Optional[CodebookState], drop: float = 0.0,
                label_smoothing: float = 0.1, visual_mode: str = "codes",
                straight_through_on: bool = True, backbone_trainable: bool = False,
                sample_seed: int = 0) -> Tensor:
    """Translation loss of the full model: decoder attends over recognized-text
    states concatenated with the visual codes."""
    enc = encode_text(ctx, ocr_tokens, params, cfg, drop)
    if visual_mode == "off":
        visual = None
    else:
        h_v = encode_image(ctx, image, enc, params, cfg, drop,
                           backbone_trainable=backbone_trainable)
        visual, _ = visual_codes(ctx, h_v, cb, visual_mode,
                                 straight_through_on=straight_through_on,
                                 sample_seed=sample_seed, st_key="tit")
    return seq_loss(ctx, enc, visual, tgt, params, cfg, drop, label_smoothing)
