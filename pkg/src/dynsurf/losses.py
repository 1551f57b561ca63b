"""Supervision and regularisation terms and their scheduled weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffmath import Var, tape

TERMS = ("rgb", "d", "sdf", "fs", "eik", "smooth", "mask")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, step: int | None = None):
        at = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite value in loss term '{term}'{at}")
        self.term = term
        self.step = step


@dataclass
class LossConfig:
    w_rgb: float = 10.0
    w_d: float = 1.0
    w_sdf: float = 10.0
    w_fs: float = 1.0
    w_eik: float = 0.1
    w_smooth: float = 0.1
    w_mask: float = 0.1
    eps_trunc: float | None = None     # None: 2.5 cells of the finest grid
    alpha_fs: float = 5.0
    delta_std: float | None = None     # None: 1% of the scene extent
    boost: float = 2.0                 # initial multiplier on rgb and eik weights
    boost_frac: float = 0.25           # ... decaying linearly to 1 over this step fraction
    boosted: tuple = ("rgb", "eik")
    eikonal_mode: str = "observed"     # or "canonical"

    def __post_init__(self):
        if any(getattr(self, f"w_{t}") < 0 for t in TERMS):
            raise ValueError("loss weights must be non-negative")
        if self.eps_trunc is not None and self.eps_trunc <= 0:
            raise ValueError("truncation distance must be positive")
        if self.alpha_fs <= 0:
            raise ValueError("free-space sharpness must be positive")
        if self.eikonal_mode not in ("observed", "canonical"):
            raise ValueError(f"unknown eikonal mode '{self.eikonal_mode}'")

    def weights(self) -> dict[str, float]:
        return {t: float(getattr(self, f"w_{t}")) for t in TERMS}

    def multipliers(self, step_frac: float) -> dict[str, float]:
        if self.boost_frac > 0:
            ramp = min(max(step_frac / self.boost_frac, 0.0), 1.0)
        else:
            ramp = 1.0
        boost = self.boost + (1.0 - self.boost) * ramp
        return {t: (boost if t in self.boosted else 1.0) for t in TERMS}


def _is_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def partition_samples(d_r, depths, eps: float):
    """Boolean masks (near-surface, free-space) from the bound b = d_r - d.

    Near-surface: |b| <= eps. Free space: b > eps. Samples further than eps
    behind the observed surface belong to neither. Rays with invalid depth
    (d_r <= 0) get empty sets.
    """
    depths = np.asarray(depths, dtype=np.float64)
    d_r = np.asarray(d_r, dtype=np.float64)
    b = d_r[..., None] - depths
    valid = (d_r > 0)[..., None]
    tr = valid & (np.abs(b) <= eps)
    fs = valid & (b > eps)
    return tr, fs


def loss_render(c_hat, c, d_hat, d_r, mask):
    """Per-ray (l_rgb, l_d): masked colour L2 norm and masked absolute depth error."""
    mask = np.asarray(mask, dtype=np.float64)
    if _is_var(c_hat, d_hat):
        diff = tape.as_var(c_hat) - np.asarray(c)
        l_rgb = tape.sqrt(tape.vsum(tape.square(diff), axis=-1) + 1e-20) * mask
        l_d = tape.vabs(np.asarray(d_r) - tape.as_var(d_hat)) * mask
        return l_rgb, l_d
    l_rgb = np.linalg.norm(np.asarray(c) - np.asarray(c_hat), axis=-1) * mask
    l_d = np.abs(np.asarray(d_r) - np.asarray(d_hat)) * mask
    return l_rgb, l_d


def _masked_mean(x, sel):
    """Mean of x over the selected samples of each ray (last axis); 0 for empty rays."""
    sel = np.asarray(sel)
    count = np.maximum(sel.sum(-1), 1)
    if isinstance(x, Var):
        return tape.vsum(x * sel, axis=-1) / count
    return (np.asarray(x) * sel).sum(-1) / count


def loss_sdf(phi, bounds, sel):
    """Per ray: mean |phi - b| over the near-surface samples."""
    if isinstance(phi, Var):
        return _masked_mean(tape.vabs(phi - np.asarray(bounds)), sel)
    return _masked_mean(np.abs(np.asarray(phi) - bounds), sel)


def loss_fs(phi, bounds, sel, alpha_fs: float = 5.0):
    """Per ray: mean of max(0, exp(-alpha phi) - 1, phi - b) over free-space samples."""
    if isinstance(phi, Var):
        pen = tape.relu(tape.maximum(tape.exp(phi * -alpha_fs) - 1.0, phi - np.asarray(bounds)))
        return _masked_mean(pen, sel)
    phi = np.asarray(phi, dtype=np.float64)
    pen = np.maximum(0.0, np.maximum(np.exp(-alpha_fs * phi) - 1.0, phi - bounds))
    return _masked_mean(pen, sel)


def loss_eik(grad, sel):
    """Per ray: mean (1 - |grad phi|)^2 over the selected samples; grad is (..., S, 3)."""
    if isinstance(grad, Var):
        norm = tape.sqrt(tape.vsum(tape.square(grad), axis=-1) + 1e-20)
        return _masked_mean(tape.square(1.0 - norm), sel)
    norm = np.linalg.norm(np.asarray(grad, dtype=np.float64), axis=-1)
    return _masked_mean((1.0 - norm) ** 2, sel)


def loss_smooth(grad_a, grad_b, n_rays: int):
    """sum_s |grad phi(x_s) - grad phi(x_s + delta)|^2 / R."""
    n_rays = max(int(n_rays), 1)
    if _is_var(grad_a, grad_b):
        diff = tape.as_var(grad_a) - grad_b
        return tape.vsum(tape.square(diff)) / n_rays
    diff = np.asarray(grad_a) - np.asarray(grad_b)
    return float((diff * diff).sum()) / n_rays


def loss_mask(mask, m_hat):
    """Per-ray binary cross entropy with the rendered opacity clamped to [1e-6, 1 - 1e-6]."""
    mask = np.asarray(mask, dtype=np.float64)
    lo, hi = 1e-6, 1.0 - 1e-6
    if isinstance(m_hat, Var):
        m = tape.clip(m_hat, lo, hi)
        return -(tape.log(m) * mask + tape.log(1.0 - m) * (1.0 - mask))
    m = np.clip(np.asarray(m_hat, dtype=np.float64), lo, hi)
    return -(mask * np.log(m) + (1.0 - mask) * np.log(1.0 - m))


@dataclass
class RaySupervision:
    """Ground truth for a batch of rays; depth is distance along the ray (0 = invalid)."""

    rgb: np.ndarray
    depth: np.ndarray
    mask: np.ndarray

    @property
    def valid_depth(self) -> np.ndarray:
        return self.depth > 0


def batch_terms(render, samples, sup: RaySupervision, cfg: LossConfig, eps_trunc: float,
                smooth_pair=None) -> dict:
    """The seven batch-level terms with their normalisers.

    rgb and mask average over all R rays; depth, sdf, free-space and Eikonal
    over the R_d rays with valid depth; smoothness over R. `smooth_pair` is
    (grad at x_s, grad at x_s + delta) or None.
    """
    n_rays = len(sup.depth)
    n_d = max(int(sup.valid_depth.sum()), 1)
    l_rgb, l_d = loss_render(render.color, sup.rgb, render.depth, sup.depth, sup.mask)
    tr, fs = partition_samples(sup.depth, samples.depths, eps_trunc)
    bounds = sup.depth[:, None] - samples.depths
    l_sdf = loss_sdf(samples.phi, bounds, tr)
    l_fs = loss_fs(samples.phi, bounds, fs, cfg.alpha_fs)
    grad = samples.grad if cfg.eikonal_mode == "observed" else samples.grad_canon
    if grad is None:
        raise ValueError("canonical Eikonal mode needs canonical gradients from the renderer")
    l_eik = loss_eik(grad, fs & ~samples.oob)
    terms = {
        "rgb": tape.vsum(l_rgb) / n_rays,
        "d": tape.vsum(l_d * sup.valid_depth) / n_d,
        "sdf": tape.vsum(l_sdf) / n_d,
        "fs": tape.vsum(l_fs) / n_d,
        "eik": tape.vsum(l_eik) / n_d,
        "mask": tape.mean(loss_mask(sup.mask, render.mask)),
    }
    if smooth_pair is not None:
        terms["smooth"] = loss_smooth(smooth_pair[0], smooth_pair[1], n_rays)
    return terms


def total_loss(terms: dict, cfg: LossConfig, step_frac: float = 1.0, step: int | None = None):
    """Scheduled weighted sum; returns (L, breakdown) with term values and effective weights."""
    weights = cfg.weights()
    mult = cfg.multipliers(step_frac)
    total = None
    breakdown = {}
    for name in TERMS:
        if name not in terms:
            continue
        v = terms[name]
        val = float(np.asarray(v.data if isinstance(v, Var) else v))
        if not np.isfinite(val):
            raise NonFiniteLossError(name, step)
        eff = weights[name] * mult[name]
        breakdown[name] = val
        breakdown[f"w_{name}"] = eff
        if eff == 0.0:
            continue
        part = v * eff
        total = part if total is None else total + part
    total = Var(np.array(0.0)) if total is None else tape.as_var(total)
    breakdown["total"] = float(total.data)
    return total, breakdown
