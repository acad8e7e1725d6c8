"""The multimodal codebook: K latent code vectors shared between text and
image hidden states, maintained by EMA clustering rather than gradients.

The EMA recurrence keeps unnormalized running sums alongside the counts
(initialized to the initial code vectors with count 1), which is the stable
standard form; codes are never gradient-updated. Codes that receive no
assignments in an update are left bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .substrate import Context, Tensor, mean_rows, scale, sq_l2, straight_through

COUNT_EPS = 1e-9  # counts below this leave the code vector untouched


@dataclass
class CodebookState:
    vectors: np.ndarray   # (K, d) code vectors e_k
    counts: np.ndarray    # (K,)  EMA counts n_k
    sums: np.ndarray      # (K, d) EMA running sums m_k, vectors = sums / counts
    decay: float          # gamma

    @property
    def k(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def copy(self) -> "CodebookState":
        return CodebookState(self.vectors.copy(), self.counts.copy(),
                             self.sums.copy(), self.decay)


@dataclass
class QuantizationResult:
    indices: np.ndarray    # (N,) code ids
    codes: np.ndarray      # (N, d) gathered vectors
    distances: np.ndarray  # (N,) L2 distance to the chosen code


def init_codebook(k: int, dim: int, seed: int, decay: float = 0.99) -> CodebookState:
    if k < 1:
        raise ShapeError(f"init_codebook: need K >= 1, got {k}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xC0DE])))
    vectors = rng.normal(0.0, dim ** -0.5, size=(k, dim))
    return CodebookState(vectors=vectors, counts=np.ones(k),
                         sums=vectors.copy(), decay=decay)


def quantize(h: np.ndarray, cb: CodebookState, chunk: int = 512) -> QuantizationResult:
    """Nearest code per row under L2, ties broken by lowest index."""
    h = np.asarray(h, dtype=np.float64)
    if cb.k == 0:
        raise ShapeError("quantize: empty codebook")
    if h.ndim != 2 or h.shape[1] != cb.dim:
        raise ShapeError(f"quantize: input shape {h.shape} vs codebook dim {cb.dim}")
    n = h.shape[0]
    indices = np.empty(n, dtype=np.int64)
    dists = np.empty(n)
    for s in range(0, n, chunk):
        block = h[s:s + chunk]
        diff = block[:, None, :] - cb.vectors[None, :, :]
        d2 = (diff * diff).sum(axis=2)
        idx = d2.argmin(axis=1)
        indices[s:s + chunk] = idx
        dists[s:s + chunk] = np.sqrt(d2[np.arange(len(block)), idx])
    return QuantizationResult(indices=indices, codes=cb.vectors[indices], distances=dists)


def ema_update(cb: CodebookState, h: np.ndarray, assignments: np.ndarray) -> CodebookState:
    """One EMA step from assigned rows; returns a new state.

    counts <- g*counts + (1-g)*c_k, sums <- g*sums + (1-g)*h_k, then
    vectors <- sums/counts for codes that actually received rows. Codes with
    no assignments keep their vector bit-identical (sums and counts decay
    jointly, so the normalized value is unchanged anyway).
    """
    h = np.asarray(h, dtype=np.float64)
    assignments = np.asarray(assignments, dtype=np.int64)
    if assignments.shape != (h.shape[0],):
        raise ShapeError(f"ema_update: {assignments.shape} assignments for {h.shape[0]} rows")
    if assignments.size and (assignments.min() < 0 or assignments.max() >= cb.k):
        raise ShapeError(f"ema_update: assignment index out of range [0, {cb.k})")
    g = cb.decay
    c = np.bincount(assignments, minlength=cb.k).astype(np.float64)
    hsum = np.zeros_like(cb.sums)
    np.add.at(hsum, assignments, h)
    counts = g * cb.counts + (1.0 - g) * c
    sums = g * cb.sums + (1.0 - g) * hsum
    vectors = cb.vectors.copy()
    touched = (c > 0) & (counts > COUNT_EPS)
    vectors[touched] = sums[touched] / counts[touched, None]
    return CodebookState(vectors=vectors, counts=counts, sums=sums, decay=g)


def pooled_quantized(h: np.ndarray, cb: CodebookState) -> np.ndarray:
    """Mean of the quantized rows: (1/N) sum_i e[indices[i]]."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[0] < 1:
        raise ShapeError("pooled_quantized: empty input")
    return quantize(h, cb).codes.mean(axis=0)


def random_codes(cb: CodebookState, n: int, seed: int) -> QuantizationResult:
    """Uniform i.i.d. code ids from a seeded generator (ablation wiring)."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    indices = rng.integers(0, cb.k, size=n)
    codes = cb.vectors[indices]
    d = np.linalg.norm(codes - codes, axis=1)  # zero by construction of the gather
    return QuantizationResult(indices=indices, codes=codes, distances=d)


# ---------------------------------------------------------------------------
# differentiable wrappers


def quantize_st(ctx: Context, h: Tensor, cb: CodebookState, key=None,
                straight_through_on: bool = True) -> tuple[Tensor, QuantizationResult]:
    """Quantize a hidden-state tensor for a downstream consumer.

    With straight-through on, the backward pass treats the quantizer as the
    identity so gradients reach ``h``; otherwise the codes are constants.
    """
    res = quantize(h.data, cb)
    if straight_through_on:
        codes = straight_through(ctx, h, res.codes, key=key)
    else:
        codes = Tensor(res.codes)
    return codes, res


def commitment_loss(ctx: Context, h: Tensor, cb: CodebookState) -> Tensor:
    """Mean-per-position squared distance to the (stop-gradient) nearest code."""
    res = quantize(h.data, cb)
    target = Tensor(res.codes)
    return scale(ctx, sq_l2(ctx, h, target), 1.0 / h.rows)


def alignment_loss(ctx: Context, h_img: Tensor, h_txt_pooled_codes: np.ndarray,
                   cb: CodebookState, key=None,
                   straight_through_on: bool = True) -> Tensor:
    """Squared distance between pooled quantized image codes and the
    (stop-gradient) pooled text codes; gradient reaches the image side only."""
    if h_img.cols != cb.dim:
        raise ShapeError(f"alignment_loss: image dim {h_img.cols} vs codebook {cb.dim}")
    codes, _ = quantize_st(ctx, h_img, cb, key=key,
                           straight_through_on=straight_through_on)
    pooled = mean_rows(ctx, codes)
    target = Tensor(h_txt_pooled_codes.reshape(1, -1))
    if target.cols != cb.dim:
        raise ShapeError(f"alignment_loss: text dim {target.cols} vs codebook {cb.dim}")
    return sq_l2(ctx, pooled, target)


def assignment_histogram(cb: CodebookState, h: np.ndarray) -> np.ndarray:
    return np.bincount(quantize(h, cb).indices, minlength=cb.k)
