"""Optimisation loop: ray batches from random frames, scheduled losses, Adam, checkpoints."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .. import canonical, losses, render
from ..diffmath import AdamState, adam_step, gradients
from ..model import PARAM_CLASSES, DynamicSurfModel
from ..scene import Sequence
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, schedule

log = logging.getLogger(__name__)


@dataclass
class FrameData:
    """Flattened per-pixel supervision for one frame."""

    cam: render.Camera
    rgb: np.ndarray       # (H*W, 3)
    dist: np.ndarray      # (H*W,) depth along the pixel ray, 0 if invalid
    mask: np.ndarray      # (H*W,)
    inside: np.ndarray    # pixel ids inside the mask
    band: np.ndarray      # pixel ids in the dilated band around it


def ray_distance(cam: render.Camera, z_depth: np.ndarray) -> np.ndarray:
    """Convert a z-depth image to distances along each pixel's unit ray."""
    h, w = z_depth.shape
    vv, uu = np.mgrid[0:h, 0:w]
    dirs = cam.pixel_dirs(uu.ravel(), vv.ravel())
    cos = dirs @ cam.pose[:3, 2]
    return z_depth.ravel() / cos


def prepare_frames(seq: Sequence, band_px: int = 8) -> list[FrameData]:
    out = []
    disk = ndimage.generate_binary_structure(2, 1)
    for f, cam in zip(seq.frames, seq.cameras):
        m = f.mask.astype(bool)
        grown = ndimage.binary_dilation(m, structure=disk, iterations=band_px) if m.any() else m
        band = grown & ~m
        out.append(FrameData(cam, f.rgb.reshape(-1, 3).astype(np.float64), ray_distance(cam, f.depth),
                             m.ravel().astype(np.float64), np.flatnonzero(m.ravel()), np.flatnonzero(band.ravel())))
    return out


def sample_pixels(fd: FrameData, n: int, rng: np.random.Generator, mode: str) -> np.ndarray:
    """Pixel ids: half inside the mask and half in the band around it, or uniform over the image."""
    total = len(fd.mask)
    if mode == "uniform" or len(fd.inside) == 0:
        return np.sort(rng.choice(total, size=min(n, total), replace=False))
    n_in = n // 2
    pools = [(fd.inside, n_in), (fd.band if len(fd.band) else np.arange(total), n - n_in)]
    picks = [rng.choice(pool, size=k, replace=len(pool) < k) for pool, k in pools]
    return np.concatenate(picks)


class Trainer:
    def __init__(self, cfg: TrainConfig, seq: Sequence, out_dir: str | None = None, init: bool = True):
        if cfg.seed is None:
            raise ValueError("a seed is required for training")
        self.cfg = cfg
        self.seq = seq
        self.out_dir = out_dir
        self.frames = prepare_frames(seq, cfg.band_px)
        init_ss, train_ss = np.random.SeedSequence(cfg.seed).spawn(2)
        init_rng = np.random.default_rng(init_ss)
        self.rng = np.random.default_rng(train_ss)
        self.model = DynamicSurfModel(cfg.model_config(), len(seq), init_rng)
        self.lcfg = cfg.loss_config()
        self.rcfg = cfg.render_config()
        self.state = AdamState()
        self.step = 0
        self.level = 0
        self.init_report = None
        self.history: list[dict] = []
        self._log_fh = None
        if init:
            self.init_report = canonical.sphere_init(self.model.grid, self.model.geo_decoder, cfg.init_center,
                                                     cfg.sphere_radius, steps=cfg.init_steps, rng=init_rng,
                                                     channels=self.model.geo_slice)

    # parameters --------------------------------------------------------------
    def param_list(self):
        groups = self.model.param_groups()
        params, scales = [], []
        for cls in PARAM_CLASSES:
            lr = {"grid": self.cfg.lr_grid, "lambda": self.cfg.lr_lambda}.get(cls, self.cfg.lr)
            for p in groups[cls]:
                params.append(p)
                scales.append(lr / self.cfg.lr)
        return params, scales

    def _upsample(self) -> None:
        old = [p.name for p in self.param_list()[0]]
        self.model.upsample()
        self.level += 1
        if self.state.m:
            for i, name in enumerate(old):
                if name in ("grid", "color_grid"):
                    self.state.m[i] = canonical.refine_nodes(self.state.m[i])
                    self.state.v[i] = canonical.refine_nodes(self.state.v[i])
        log.info("grid upsampled to %d^3 at step %d", self.model.grid.resolution, self.step)

    # one optimisation step ---------------------------------------------------
    def batch(self, t: int, pix: np.ndarray):
        """Rays and supervision for frame t at pixel ids `pix` (rays missing the box dropped)."""
        fd = self.frames[t]
        w = fd.cam.width
        pixels = np.stack([pix % w, pix // w], axis=-1)
        lo = np.asarray(self.cfg.box_origin)
        rays = render.make_rays(fd.cam, pixels, t, lo, lo + np.asarray(self.cfg.box_extent), self.rcfg.box_pad)
        ids = rays.pixels[:, 1] * w + rays.pixels[:, 0]
        dt = self.model.dtype
        sup = losses.RaySupervision(fd.rgb[ids].astype(dt), fd.dist[ids].astype(dt), fd.mask[ids].astype(dt))
        return rays, sup

    def loss(self, rays, sup, step_frac: float, depths=None, rng=None):
        """Forward pass; returns (total Var, breakdown)."""
        terms = self.terms(rays, sup, depths, rng)
        return losses.total_loss(terms, self.lcfg, step_frac, self.step)

    def terms(self, rays, sup, depths=None, rng=None) -> dict:
        """Unweighted per-term losses for one ray batch (tape nodes)."""
        rng = rng if rng is not None else self.rng
        codes = self.model.codes(rays.t)
        out, samples = render.render_rays(self.model, rays, codes, rng, self.rcfg, depths)
        smooth = None
        if self.lcfg.w_smooth > 0:
            sel = np.flatnonzero((sup.mask > 0) & (sup.depth > 0))
            if self.cfg.smooth_points is not None:
                sel = sel[:self.cfg.smooth_points]
            if len(sel):
                xs = rays.origins[sel] + sup.depth[sel, None].astype(np.float64) * rays.dirs[sel]
                delta = rng.normal(0.0, self.lcfg.delta_std, xs.shape) if self.lcfg.delta_std > 0 else 0.0
                ga, _ = self.model.sdf_grad(xs, codes)
                gb, _ = self.model.sdf_grad(xs + delta, codes)
                smooth = (ga, gb)
        terms = losses.batch_terms(out, samples, sup, self.lcfg, self.lcfg.eps_trunc, smooth)
        if smooth is None:
            terms["smooth"] = 0.0
        return terms

    def train_step(self) -> dict:
        cfg = self.cfg
        sched = schedule(self.step, cfg)
        while self.level < sched.grid_level:
            self._upsample()
        self.model.field.pe.window_alpha = sched.window_alpha
        t = int(self.rng.integers(len(self.frames)))
        pix = sample_pixels(self.frames[t], cfg.rays, self.rng, cfg.ray_sampling)
        rays, sup = self.batch(t, pix)
        total, breakdown = self.loss(rays, sup, self.step / cfg.steps)
        params, scales = self.param_list()
        grads = gradients(total, params, dense=False)
        adam_step([p.data for p in params], grads, self.state, cfg.lr * sched.lr_factor, lr_scale=scales)
        lam = self.model.sharpness.log_lam
        np.minimum(lam.data, np.log(sched.lambda_max), out=lam.data)
        breakdown.update(step=self.step, frame=t, lam=float(self.model.sharpness), level=self.level,
                         window=sched.window_alpha)
        self.step += 1
        return breakdown

    # persistence ---------------------------------------------------------------
    def arrays(self) -> dict[str, np.ndarray]:
        params, _ = self.param_list()
        out = {p.name: p.data for p in params}
        for i, p in enumerate(params):
            if self.state.m:
                out[f"adam.m.{p.name}"] = self.state.m[i]
                out[f"adam.v.{p.name}"] = self.state.v[i]
        return out

    def meta(self) -> dict:
        return {"step": self.step, "config": self.cfg.to_dict(), "config_hash": self.cfg.hash(),
                "grid_level": self.level, "grid_resolution": self.model.grid.resolution,
                "adam_t": self.state.t, "rng": self.rng.bit_generator.state, "n_frames": len(self.frames),
                "dtype": self.cfg.dtype, "format": "dynsurf-checkpoint",
                "cameras": [c.to_dict() for c in self.seq.cameras]}

    def save(self, path: str) -> str:
        return save_checkpoint(path, self.arrays(), self.meta())

    def restore(self, arrays: dict, meta: dict) -> None:
        if meta["config_hash"] != self.cfg.hash():
            raise ValueError("checkpoint was written with a different configuration")
        while self.level < meta["grid_level"]:
            self.model.upsample()
            self.level += 1
        params, _ = self.param_list()
        for p in params:
            if p.name not in arrays:
                raise ValueError(f"checkpoint lacks parameter '{p.name}'")
            if arrays[p.name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for '{p.name}'")
            p.data[...] = arrays[p.name]
        self.state = AdamState(int(meta["adam_t"]))
        if f"adam.m.{params[0].name}" in arrays:
            self.state.m = [arrays[f"adam.m.{p.name}"].astype(p.data.dtype) for p in params]
            self.state.v = [arrays[f"adam.v.{p.name}"].astype(p.data.dtype) for p in params]
        self.rng.bit_generator.state = meta["rng"]
        self.step = int(meta["step"])

    @classmethod
    def resume(cls, path: str, seq: Sequence, out_dir: str | None = None, cfg: TrainConfig | None = None):
        arrays, meta = load_checkpoint(path)
        cfg = cfg or TrainConfig.from_dict(meta["config"])
        tr = cls(cfg, seq, out_dir, init=False)
        tr.restore(arrays, meta)
        return tr

    # driver --------------------------------------------------------------------
    def _log(self, rec: dict) -> None:
        keys = ["step", "frame", "total"] + list(losses.TERMS) + [f"w_{t}" for t in losses.TERMS] + \
            ["lam", "level", "window"]
        line = " ".join(f"{k}={rec[k]:.6g}" if isinstance(rec[k], float) else f"{k}={rec[k]}" for k in keys if k in rec)
        if self._log_fh is not None:
            self._log_fh.write(line + "\n")
            self._log_fh.flush()
        if rec["step"] % max(self.cfg.log_every, 1) == 0:
            log.info(line)

    def run(self, until: int | None = None) -> dict:
        """Train to `until` (default: the configured step count); returns the last breakdown."""
        until = self.cfg.steps if until is None else min(until, self.cfg.steps)
        rec = {}
        if self.out_dir:
            os.makedirs(self.out_dir, exist_ok=True)
            self._log_fh = open(os.path.join(self.out_dir, "train.log"), "a")
        t0 = time.time()
        try:
            while self.step < until:
                rec = self.train_step()
                self.history.append({k: rec[k] for k in ("step", "total") + losses.TERMS if k in rec})
                self._log(rec)
                if self.out_dir and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                    self.save(os.path.join(self.out_dir, f"ckpt_{self.step:06d}.dsc"))
                if self.out_dir and self.cfg.debug_every and self.step % self.cfg.debug_every == 0:
                    self.debug_render()
            if self.out_dir:
                self.save(os.path.join(self.out_dir, "final.dsc"))
        finally:
            if self._log_fh is not None:
                self._log_fh.close()
                self._log_fh = None
        log.info("trained to step %d in %.1fs", self.step, time.time() - t0)
        return rec

    def debug_render(self) -> None:
        from .io import save_render
        t = self.cfg.debug_frame
        rgb, depth, mask = render.render_image(self.model, self.frames[t].cam, t, np.random.default_rng(0),
                                               self.rcfg)
        save_render(os.path.join(self.out_dir, "debug"), f"step{self.step:06d}", rgb, depth, mask)


def load_model(path: str) -> tuple[DynamicSurfModel, TrainConfig, dict]:
    """Rebuild the model stored in a checkpoint (no sequence needed); returns (model, config, meta)."""
    arrays, meta = load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    model = DynamicSurfModel(cfg.model_config(), int(meta["n_frames"]), np.random.default_rng(0))
    for _ in range(int(meta["grid_level"])):
        model.upsample()
    for name, p in model.named_params().items():
        if name not in arrays or arrays[name].shape != p.data.shape:
            raise ValueError(f"checkpoint {path} lacks a matching block for '{name}'")
        p.data[...] = arrays[name]
    # the window in force during the last completed step
    last = min(max(int(meta["step"]) - 1, 0), cfg.steps - 1)
    model.field.pe.window_alpha = schedule(last, cfg).window_alpha
    return model, cfg, meta


def train(cfg: TrainConfig, seq: Sequence, out_dir: str | None = None) -> Trainer:
    tr = Trainer(cfg, seq, out_dir)
    tr.run()
    return tr
