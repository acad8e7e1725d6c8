"""Central finite-difference checking of tape gradients.

``loss_fn`` receives a Context and must rebuild the loss from scratch; it has
to be deterministic given that context (dropout is fine because masks are
counter-based, but the same seed/step/salt must be used throughout).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from ..errors import NonDeterministicError
from .tensor import Context, Tape, Tensor


@dataclass
class GradReport:
    max_rel_err: float
    per_param: dict[str, float]
    worst_param: str

    def __str__(self):
        return f"grad_check: max rel err {self.max_rel_err:.3e} ({self.worst_param})"


def _rel_err(a: float, f: float) -> float:
    denom = max(abs(a), abs(f), 1e-5)
    return abs(a - f) / denom


def grad_check(loss_fn: Callable[[Context], Tensor],
               params: Mapping[str, Tensor],
               eps: float = 1e-5,
               samples_per_param: int = 12,
               seed: int = 0,
               train: bool = False) -> GradReport:
    """Compare tape gradients against central finite differences.

    For each parameter a seeded sample of entries is perturbed by +-eps.
    Parameters with no path to the loss must report an exactly-zero analytic
    gradient; they are checked like any other entry (FD is exactly zero too
    because the loss bits do not move).
    """

    def fresh_ctx(tape=None):
        return Context(training=train, tape=tape, seed=seed, step=0, salt=0)

    l0 = loss_fn(fresh_ctx()).item()
    l1 = loss_fn(fresh_ctx()).item()
    if l0 != l1:
        raise NonDeterministicError(f"loss_fn returned {l0!r} then {l1!r}")

    tape = Tape()
    loss = loss_fn(fresh_ctx(tape))
    tape.backward(loss)

    rng = np.random.default_rng(seed)
    per_param: dict[str, float] = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        size = p.data.size
        k = min(samples_per_param, size)
        flat_idx = rng.choice(size, size=k, replace=False)
        worst = 0.0
        for fi in flat_idx:
            i, j = np.unravel_index(fi, p.data.shape)
            orig = p.data[i, j]
            p.data[i, j] = orig + eps
            lp = loss_fn(fresh_ctx()).item()
            p.data[i, j] = orig - eps
            lm = loss_fn(fresh_ctx()).item()
            p.data[i, j] = orig
            fd = (lp - lm) / (2.0 * eps)
            worst = max(worst, _rel_err(float(analytic[i, j]), fd))
        per_param[name] = worst
    for p in params.values():
        p.zero_grad()
    worst_name = max(per_param, key=per_param.get) if per_param else ""
    return GradReport(max(per_param.values(), default=0.0), per_param, worst_name)
