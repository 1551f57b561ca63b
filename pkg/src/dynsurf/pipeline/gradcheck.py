"""Finite-difference check of every loss term against reverse-mode gradients.

A tiny float64 model renders a 4-ray micro-batch with frozen sample depths
and a fixed smoothness perturbation, so the loss is a deterministic smooth
function of the parameters. Entries are drawn from each parameter class
where the total-loss gradient is non-negligible; every term is then checked
at the same entries, with one pair of forward passes per entry.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .. import losses, render
from ..diffmath import gradients, no_grad, rel_error
from ..model import PARAM_CLASSES
from ..scene import default_camera, generate_sequence, make_scene
from .config import TrainConfig
from .train import Trainer

log = logging.getLogger(__name__)


@dataclass
class GradCheckRow:
    term: str
    param_class: str
    max_rel: float
    entries: int


@dataclass
class GradCheckReport:
    rows: list[GradCheckRow] = field(default_factory=list)
    tol: float = 1e-4
    seconds: float = 0.0

    @property
    def max_rel(self) -> float:
        return max((r.max_rel for r in self.rows), default=0.0)

    @property
    def ok(self) -> bool:
        return bool(self.rows) and self.max_rel < self.tol

    def format(self) -> str:
        lines = [f"{'term':8s} {'class':9s} {'entries':>7s} {'max rel err':>12s}"]
        for r in self.rows:
            lines.append(f"{r.term:8s} {r.param_class:9s} {r.entries:7d} {r.max_rel:12.3e}")
        lines.append(f"worst {self.max_rel:.3e} (tol {self.tol:g}) in {self.seconds:.1f}s: "
                     f"{'PASS' if self.ok else 'FAIL'}")
        return "\n".join(lines)


def micro_config(seed: int = 0) -> TrainConfig:
    """Small float64 model exercising every component (skip layer, ambient coords, all losses).

    The initial sphere is smaller than the observed one, so free-space samples
    violate their bound and the free-space term carries gradient.
    """
    return TrainConfig(seed=seed, dtype="float64", rays=4, grid_resolution=8, z_dim=8, app_dim=8, pe_bands=3,
                       deform_width=16, deform_depth=4, deform_skip=2, decoder_width=16, decoder_depth=2,
                       n_uniform=24, per_round=4, rounds=2, init_steps=40, init_radius=0.24, smooth_points=2,
                       steps=100)


def wake_output_layers(tr: Trainer, rng: np.random.Generator, std: float = 0.05) -> None:
    """Give the zero-initialised warp/topology output layers small weights so every path carries gradient."""
    for net in (tr.model.field.deform_net, tr.model.field.topo_net):
        if net is None:
            continue
        for v in net.layers[-1].values():
            v.data[...] = rng.normal(0.0, std, v.data.shape)


def micro_batch(tr: Trainer, rng: np.random.Generator):
    """4 rays through the object and its silhouette band, with frozen depths."""
    fd = tr.frames[0]
    pix = np.concatenate([rng.choice(fd.inside, 3, replace=False), rng.choice(fd.band, 1)])
    rays, sup = tr.batch(0, pix)
    with no_grad():
        depths = render.sample_depths(tr.model, rays, tr.model.codes(0), rng, tr.rcfg)
    return rays, sup, depths


def run_gradcheck(seed: int = 0, per_class: int = 8, h: float = 1e-5, tol: float = 1e-4,
                  floor: float = 1e-6) -> GradCheckReport:
    """Relative errors use max(|a|, |b|, floor) as denominator; `floor` sits above the
    central-difference roundoff (~eps |f| / h), so exactly-zero gradients compare absolutely."""
    t0 = time.time()
    cfg = micro_config(seed)
    scene = make_scene("sphere", n_frames=2)
    seq = generate_sequence(scene, default_camera(24))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")      # a short sphere_init is enough here
        tr = Trainer(cfg, seq)
    tr.model.field.pe.window_alpha = 0.7 * cfg.pe_bands     # partially open window: all ramp branches live
    rng = np.random.default_rng(seed + 1)
    wake_output_layers(tr, rng)
    rays, sup, depths = micro_batch(tr, rng)
    lcfg = tr.lcfg
    weights = lcfg.weights()

    def evaluate():
        # fixed stream for the smoothness perturbation
        terms = tr.terms(rays, sup, depths, np.random.default_rng(seed + 2))
        terms = {k: v for k, v in terms.items() if not np.isscalar(v)}
        total = None
        for k, v in terms.items():
            total = v * weights[k] if total is None else total + v * weights[k]
        terms["total"] = total
        return terms

    names = [n for n in losses.TERMS] + ["total"]
    terms = evaluate()
    names = [n for n in names if n in terms]
    groups = tr.model.param_groups()
    report = GradCheckReport(tol=tol)
    pick_rng = np.random.default_rng(seed + 3)
    for cls in PARAM_CLASSES:
        params = groups[cls]
        g_total = gradients(terms["total"], params)
        # entries with a non-negligible total gradient, spread over the arrays of the class
        scale = max(float(np.abs(g).max()) for g in g_total)
        live = [np.flatnonzero(np.abs(g).reshape(-1) > 1e-3 * scale) for g in g_total]
        live_ids = [pi for pi, idx in enumerate(live) if len(idx)]
        if not live_ids:
            raise RuntimeError(f"no gradient reaches parameter class '{cls}'")
        chosen = []
        for k, pi in enumerate(live_ids):
            n_pick = per_class // len(live_ids) + (k < per_class % len(live_ids))
            idx = pick_rng.choice(live[pi], min(n_pick, len(live[pi])), replace=False)
            chosen += [(pi, int(i)) for i in idx]
        analytic = {n: [g.reshape(-1) for g in gradients(terms[n], params)] for n in names}
        numeric = {n: [] for n in names}
        for pi, i in chosen:
            flat = params[pi].data.reshape(-1)
            orig = flat[i]
            vals = []
            for sgn in (1, -1):
                flat[i] = orig + sgn * h
                with no_grad():
                    out = evaluate()
                vals.append({n: float(out[n].data) for n in names})
            flat[i] = orig
            for n in names:
                numeric[n].append((vals[0][n] - vals[1][n]) / (2 * h))
        for n in names:
            a = np.array([analytic[n][pi][i] for pi, i in chosen])
            err = rel_error(a, np.array(numeric[n]), floor)
            report.rows.append(GradCheckRow(n, cls, float(err.max()), len(chosen)))
    report.seconds = time.time() - t0
    return report
