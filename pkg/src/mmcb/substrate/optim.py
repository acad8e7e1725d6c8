"""Adam with the inverse-square-root warmup schedule, plus global-norm clipping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError


def lr_at(step: int, d_model: int, warmup: int) -> float:
    """d_model**-0.5 * min(step**-0.5, step * warmup**-1.5); continuous at the knee."""
    if warmup <= 0:
        raise ShapeError(f"lr_at: warmup must be positive, got {warmup}")
    if step < 1:
        raise ShapeError(f"lr_at: step must be >= 1, got {step}")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> float:
    """Scale all gradients in place so their joint L2 norm is <= max_norm.
    Returns the pre-clip norm."""
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


@dataclass
class OptimizerState:
    """Per-parameter Adam moments plus the shared schedule constants."""

    d_model: int
    warmup: int
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def lr(self) -> float:
        return lr_at(self.step, self.d_model, self.warmup)


def adam_step(state: OptimizerState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray], lr: float | None = None) -> float:
    """One bias-corrected Adam update, in place on ``params``.

    Parameters absent from ``grads`` (frozen or unused this step) are left
    untouched and their moments are not advanced. Returns the lr used.
    """
    state.step += 1
    if lr is None:
        lr = state.lr()
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} vs param {p.shape} for {name}")
        if not np.isfinite(g).all():
            raise ShapeError(f"adam_step: non-finite gradient for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return lr
