"""Dense 2-D float64 tensors and a record/replay gradient tape.

Every network in this package is expressed through the primitives below, so
each primitive carries a hand-written backward rule; all of them are covered
by finite-difference checks in the test suite. Scalars travel as (1, 1)
tensors. There is no broadcasting beyond what individual ops state.

Dropout is counter-based: the mask is a pure function of
(seed, step, salt, op_index), so any forward pass replays bit-exactly
without carrying RNG state around.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import NonFiniteError, ShapeError

NEG_MASK = -1e9          # additive pre-softmax mask value
VAR_FLOOR = 1e-6         # layer-norm variance floor; constant rows map to zero

_finite_checks = True


@contextmanager
def finite_checks(enabled: bool):
    """Temporarily enable/disable NaN/Inf rejection at op boundaries."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = enabled
    try:
        yield
    finally:
        _finite_checks = prev


class Tensor:
    """A rows x cols float64 matrix, optionally accumulating a gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"tensor: expected 2-D data, got shape {arr.shape}")
        if check and _finite_checks and not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor: non-finite entries in shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has shape {self.shape}, not (1, 1)")
        return float(self.data[0, 0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Operations recorded in forward (topological) order.

    backward() visits each recorded op exactly once, in reverse; tensors that
    never receive a gradient are simply skipped, so parameters with no path to
    the loss end up with grad None (reported as exact zero).
    """

    __slots__ = ("nodes", "_produced", "touched_leaves")

    def __init__(self):
        self.nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._produced: set[int] = set()
        # id() -> Tensor for every requires_grad leaf that fed a recorded op;
        # used by the pipeline to assert freeze contracts structurally.
        self.touched_leaves: dict[int, Tensor] = {}

    def record(self, out: Tensor, inputs: Sequence[Tensor],
               backward: Callable[[np.ndarray], None]):
        out.requires_grad = True
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self.touched_leaves[id(t)] = t
        self._produced.add(id(out))
        self.nodes.append((out, backward))

    def backward(self, loss: Tensor):
        if loss.data.shape != (1, 1):
            raise ShapeError(f"backward: loss has shape {loss.shape}, not (1, 1)")
        loss.grad = np.ones((1, 1))
        for out, fn in reversed(self.nodes):
            if out.grad is not None:
                fn(out.grad)

    def __len__(self):
        return len(self.nodes)


class Context:
    """State for one forward pass: optional tape plus dropout seeding.

    ``salt`` distinguishes examples within a batch so their dropout masks
    differ while remaining replayable. ``st_capture``/``st_frozen`` support
    the frozen-offset surrogate used to finite-difference-check
    straight-through paths (see gradcheck module).
    """

    __slots__ = ("training", "tape", "seed", "step", "salt", "op_index",
                 "st_capture", "st_frozen")

    def __init__(self, training: bool = False, tape: Optional[Tape] = None,
                 seed: int = 0, step: int = 0, salt: int = 0):
        self.training = training
        self.tape = tape
        self.seed = seed
        self.step = step
        self.salt = salt
        self.op_index = 0
        self.st_capture: Optional[dict] = None
        self.st_frozen: Optional[dict] = None

    @classmethod
    def inference(cls) -> "Context":
        return cls(training=False, tape=None)

    def dropout_rng(self) -> np.random.Generator:
        k = self.op_index
        self.op_index += 1
        ss = np.random.SeedSequence([self.seed, self.step, self.salt, k])
        return np.random.Generator(np.random.Philox(ss))


def _accum(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _maybe_record(ctx: Optional[Context], out: Tensor,
                  inputs: Sequence[Tensor],
                  backward: Callable[[np.ndarray], None]):
    if ctx is not None and ctx.tape is not None and any(t.requires_grad for t in inputs):
        ctx.tape.record(out, inputs, backward)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity whose gradient is defined as zero."""
    return Tensor(x.data, requires_grad=False, check=False)


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(ctx, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, check=True)

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    _maybe_record(ctx, out, (a, b), bwd)
    return out


def scale(ctx, x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c, check=True)

    def bwd(g):
        _accum(x, g * c)

    _maybe_record(ctx, out, (x,), bwd)
    return out


def matmul(ctx, a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: shapes {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data, check=True)

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    _maybe_record(ctx, out, (a, b), bwd)
    return out


def linear(ctx, x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x @ w + b with b broadcast over rows."""
    if x.cols != w.rows:
        raise ShapeError(f"linear: shapes {x.shape} vs {w.shape}")
    y = x.data @ w.data
    if b is not None:
        if b.shape != (1, w.cols):
            raise ShapeError(f"linear: bias shape {b.shape} vs (1, {w.cols})")
        y = y + b.data
    out = Tensor(y, check=True)

    def bwd(g):
        _accum(x, g @ w.data.T)
        _accum(w, x.data.T @ g)
        if b is not None:
            _accum(b, g.sum(axis=0, keepdims=True))

    inputs = (x, w) if b is None else (x, w, b)
    _maybe_record(ctx, out, inputs, bwd)
    return out


def relu(ctx, x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), check=False)

    def bwd(g):
        _accum(x, g * (x.data > 0.0))

    _maybe_record(ctx, out, (x,), bwd)
    return out


def concat_rows(ctx, a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.cols:
        raise ShapeError(f"concat_rows: widths {a.shape} vs {b.shape}")
    out = Tensor(np.concatenate([a.data, b.data], axis=0), check=False)
    na = a.rows

    def bwd(g):
        _accum(a, g[:na])
        _accum(b, g[na:])

    _maybe_record(ctx, out, (a, b), bwd)
    return out


def mean_rows(ctx, x: Tensor) -> Tensor:
    if x.rows == 0:
        raise ShapeError("mean_rows: empty input")
    n = x.rows
    out = Tensor(x.data.mean(axis=0, keepdims=True), check=True)

    def bwd(g):
        _accum(x, np.broadcast_to(g / n, x.shape).copy())

    _maybe_record(ctx, out, (x,), bwd)
    return out


def sq_l2(ctx, a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared differences, as a (1, 1) tensor."""
    if a.shape != b.shape:
        raise ShapeError(f"sq_l2: shapes {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = Tensor([[float((diff * diff).sum())]], check=True)

    def bwd(g):
        s = 2.0 * g[0, 0]
        _accum(a, s * diff)
        _accum(b, -s * diff)

    _maybe_record(ctx, out, (a, b), bwd)
    return out


# ---------------------------------------------------------------------------
# normalization / softmax


def softmax_rows(ctx, x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p, check=False)

    def bwd(g):
        _accum(x, p * (g - (g * p).sum(axis=1, keepdims=True)))

    _maybe_record(ctx, out, (x,), bwd)
    return out


def layer_norm(ctx, x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Row-wise layer norm; variance floored at VAR_FLOOR so constant rows
    map to zero before the affine rescale."""
    d = x.cols
    if gamma.shape != (1, d) or beta.shape != (1, d):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs (1, {d})")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    active = var > VAR_FLOOR
    inv = 1.0 / np.sqrt(np.maximum(var, VAR_FLOOR))
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data, check=True)

    def bwd(g):
        gxh = g * gamma.data
        # where the floor is active, d(inv)/dx = 0 and only centering remains
        term = gxh - gxh.mean(axis=1, keepdims=True)
        term = term - xhat * ((gxh * xhat).mean(axis=1, keepdims=True) * active)
        _accum(x, inv * term)
        _accum(gamma, (g * xhat).sum(axis=0, keepdims=True))
        _accum(beta, g.sum(axis=0, keepdims=True))

    _maybe_record(ctx, out, (x, gamma, beta), bwd)
    return out


# ---------------------------------------------------------------------------
# lookup / dropout / straight-through


def embedding(ctx, table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embedding: ids must be 1-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.rows):
        raise ShapeError(f"embedding: id out of range for table {table.shape}")
    out = Tensor(table.data[ids], check=False)

    def bwd(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, ids, g)
            _accum(table, acc)

    _maybe_record(ctx, out, (table,), bwd)
    return out


def dropout(ctx, x: Tensor, rate: float) -> Tensor:
    """Inverted dropout. Identity at rate 0 or outside training."""
    if not (0.0 <= rate < 1.0):
        raise ShapeError(f"dropout: rate {rate} outside [0, 1)")
    if ctx is None or not ctx.training or rate == 0.0:
        return x
    rng = ctx.dropout_rng()
    keep = rng.random(x.shape) >= rate
    inv = 1.0 / (1.0 - rate)
    out = Tensor(x.data * keep * inv, check=False)

    def bwd(g):
        _accum(x, g * keep * inv)

    _maybe_record(ctx, out, (x,), bwd)
    return out


def straight_through(ctx, x: Tensor, values: np.ndarray, key=None) -> Tensor:
    """Forward takes ``values``; backward copies the gradient to ``x``.

    When the context carries ``st_frozen``, the op is replaced by the smooth
    surrogate x + (values - x0) with the offset frozen at capture time, which
    makes the straight-through convention finite-difference checkable.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape != x.shape:
        raise ShapeError(f"straight_through: shapes {x.shape} vs {values.shape}")
    if ctx is not None and ctx.st_frozen is not None:
        off = ctx.st_frozen[key]
        out = Tensor(x.data + off, check=True)
    else:
        if ctx is not None and ctx.st_capture is not None:
            ctx.st_capture[key] = values - x.data
        out = Tensor(values, check=True)

    def bwd(g):
        _accum(x, g)

    _maybe_record(ctx, out, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# attention


def causal_mask(n: int) -> np.ndarray:
    m = np.zeros((n, n))
    m[np.triu_indices(n, k=1)] = NEG_MASK
    return m


def multi_head_attention(ctx, q_in: Tensor, k_in: Tensor, v_in: Tensor,
                         wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                         bq: Tensor, bk: Tensor, bv: Tensor, bo: Tensor,
                         heads: int, mask: Optional[np.ndarray] = None) -> Tensor:
    """Scaled dot-product attention over ``heads`` column slices, fused into a
    single tape node. ``mask`` is additive, (n_q, n_k), applied pre-softmax."""
    d = wq.cols
    if d % heads != 0:
        raise ShapeError(f"mha: width {d} not divisible by {heads} heads")
    if k_in.rows != v_in.rows:
        raise ShapeError(f"mha: key/value rows {k_in.shape} vs {v_in.shape}")
    nq, nk, dk = q_in.rows, k_in.rows, d // heads
    if mask is not None and mask.shape != (nq, nk):
        raise ShapeError(f"mha: mask shape {mask.shape} vs ({nq}, {nk})")
    if mask is not None and not (mask == NEG_MASK).sum(axis=1).max() < nk:
        raise ShapeError("mha: a query row masks out every key")

    q = q_in.data @ wq.data + bq.data
    k = k_in.data @ wk.data + bk.data
    v = v_in.data @ wv.data + bv.data
    qh = q.reshape(nq, heads, dk).transpose(1, 0, 2)
    kh = k.reshape(nk, heads, dk).transpose(1, 0, 2)
    vh = v.reshape(nk, heads, dk).transpose(1, 0, 2)
    scores = qh @ kh.transpose(0, 2, 1) / np.sqrt(dk)
    if mask is not None:
        scores = scores + mask[None, :, :]
    scores -= scores.max(axis=2, keepdims=True)
    att = np.exp(scores)
    att /= att.sum(axis=2, keepdims=True)
    oh = att @ vh
    o = oh.transpose(1, 0, 2).reshape(nq, d)
    out = Tensor(o @ wo.data + bo.data, check=True)

    def bwd(g):
        _accum(wo, o.T @ g)
        _accum(bo, g.sum(axis=0, keepdims=True))
        go = (g @ wo.data.T).reshape(nq, heads, dk).transpose(1, 0, 2)
        ga = go @ vh.transpose(0, 2, 1)
        gvh = att.transpose(0, 2, 1) @ go
        gs = att * (ga - (ga * att).sum(axis=2, keepdims=True))
        gqh = gs @ kh / np.sqrt(dk)
        gkh = gs.transpose(0, 2, 1) @ qh / np.sqrt(dk)
        gq = gqh.transpose(1, 0, 2).reshape(nq, d)
        gk = gkh.transpose(1, 0, 2).reshape(nk, d)
        gv = gvh.transpose(1, 0, 2).reshape(nk, d)
        _accum(q_in, gq @ wq.data.T)
        _accum(wq, q_in.data.T @ gq)
        _accum(bq, gq.sum(axis=0, keepdims=True))
        _accum(k_in, gk @ wk.data.T)
        _accum(wk, k_in.data.T @ gk)
        _accum(bk, gk.sum(axis=0, keepdims=True))
        _accum(v_in, gv @ wv.data.T)
        _accum(wv, v_in.data.T @ gv)
        _accum(bv, gv.sum(axis=0, keepdims=True))

    _maybe_record(ctx, out, (q_in, k_in, v_in, wq, wk, wv, wo, bq, bk, bv, bo), bwd)
    return out


# ---------------------------------------------------------------------------
# loss


def label_smoothed_ce(ctx, logits: Tensor, targets: np.ndarray, epsilon: float,
                      mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean over unmasked positions of -sum_w q(w) log p(w) with
    q = (1 - eps) * onehot + eps / V."""
    if not (0.0 <= epsilon < 1.0):
        raise ShapeError(f"label_smoothed_ce: epsilon {epsilon} outside [0, 1)")
    targets = np.asarray(targets, dtype=np.int64)
    n, vocab = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"label_smoothed_ce: targets shape {targets.shape} vs ({n},)")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ShapeError(f"label_smoothed_ce: target id out of range for vocab {vocab}")
    keep = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    m = int(keep.sum())
    if m == 0:
        raise ShapeError("label_smoothed_ce: no unmasked positions")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    nll_true = -logp[np.arange(n), targets]
    nll_unif = -logp.mean(axis=1)
    per_pos = (1.0 - epsilon) * nll_true + epsilon * nll_unif
    out = Tensor([[float(per_pos[keep].mean())]], check=True)

    def bwd(g):
        p = np.exp(logp)
        q = np.full_like(p, epsilon / vocab)
        q[np.arange(n), targets] += 1.0 - epsilon
        gl = (p - q) * keep[:, None] * (g[0, 0] / m)
        _accum(logits, gl)

    _maybe_record(ctx, out, (logits,), bwd)
    return out
