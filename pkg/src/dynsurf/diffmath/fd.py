"""Central finite differences, used as the independent gradient oracle."""

from __future__ import annotations

from typing import Callable

import numpy as np


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """(f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate of `x`."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def finite_diff_entries(f: Callable[[], float], array: np.ndarray, indices, h: float = 1e-5) -> np.ndarray:
    """Central differences of a closure w.r.t. selected entries of `array`, perturbed in place."""
    flat = array.reshape(-1)
    out = np.zeros(len(indices))
    for n, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at entry {i}")
        out[n] = (fp - fm) / (2 * h)
    return out


def rel_error(a, b, floor: float = 1e-6) -> np.ndarray:
    """|a - b| / max(|a|, |b|, floor), elementwise."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
