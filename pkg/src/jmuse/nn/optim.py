from __future__ import annotations

from typing import Mapping

import numpy as np

from .network import ParamStore


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


def adam_step(
    params: ParamStore,
    grads: Mapping[str, np.ndarray],
    lr: float = 1e-4,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place.

    All gradients are checked before anything is modified, so a bad gradient
    leaves parameters and moments untouched.
    """
    for name in params:
        if name not in grads:
            raise KeyError(f"missing gradient for {name!r}")
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradientError(name)
    b1, b2 = betas
    params.step += 1
    t = params.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        m = params.m.get(name)
        v = params.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        params.m[name] = m.astype(p.dtype)
        params.v[name] = v.astype(p.dtype)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
