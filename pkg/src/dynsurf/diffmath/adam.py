from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tape import SparseGrad


@dataclass
class AdamState:
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, lr_scale=None) -> AdamState:
    """Bias-corrected Adam update applied in place to each array in `params`.

    A `SparseGrad` entry updates only the rows it touches (lazy Adam: moments of
    untouched rows are left as they are). `lr_scale` optionally gives a
    per-array multiplier on `lr`.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameter arrays but {len(grads)} gradients")
    if lr <= 0 or not (0 <= beta1 < 1 and 0 <= beta2 < 1):
        raise ValueError("need lr > 0 and 0 <= beta1, beta2 < 1")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        step = lr * (1.0 if lr_scale is None else lr_scale[i])
        if isinstance(g, SparseGrad):
            if tuple(g.shape) != p.shape:
                raise ValueError(f"shape mismatch for parameter {i}: {p.shape} vs {g.shape}")
            g = g.coalesce()
            rows = g.index
            p2 = p.reshape(-1, p.shape[-1])
            m2 = state.m[i].reshape(p2.shape)
            v2 = state.v[i].reshape(p2.shape)
            m = beta1 * m2[rows] + (1.0 - beta1) * g.rows
            v = beta2 * v2[rows] + (1.0 - beta2) * (g.rows * g.rows)
            m2[rows] = m
            v2[rows] = v
            p2[rows] -= (step / c1) * m / (np.sqrt(v / c2) + eps)
            continue
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch for parameter {i}: {p.shape} vs {g.shape}")
        m, v = state.m[i], state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (step / c1) * m / (np.sqrt(v / c2) + eps)
    return state
