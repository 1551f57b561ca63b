"""Training configuration, presets and the step schedule."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from ..losses import LossConfig
from ..model import ModelConfig
from ..render import RenderConfig


@dataclass
class TrainConfig:
    steps: int = 3000
    rays: int = 48
    lr: float = 5e-4
    lr_grid: float = 1e-2
    lr_lambda: float = 1e-3
    lr_decay: float = 0.1                # rates end at this fraction of their start (exponential decay)
    seed: int | None = None
    # grid schedule
    grid_resolution: int = 24
    grid_doublings: int = 2
    grid_fracs: tuple = (0.3, 0.6)
    # positional-encoding window ramp (fraction of steps to open all bands)
    pe_ramp_frac: float = 0.4
    lambda_max: float = 2000.0
    # model
    ambient_dim: int = 2
    z_dim: int = 64
    app_dim: int = 32
    pe_bands: int = 6
    deform_width: int = 64
    deform_depth: int = 4
    deform_skip: int | None = None
    decoder_width: int = 64
    decoder_depth: int = 2
    separate_color_grid: bool = False
    box_origin: tuple = (-0.5, -0.5, -0.5)
    box_extent: tuple = (1.0, 1.0, 1.0)
    dtype: str = "float32"
    # sampling
    n_uniform: int = 64
    per_round: int = 16
    rounds: int = 4
    sample_floor: float = 0.01
    last_alpha: str = "virtual"
    ray_sampling: str = "mask_band"      # or "uniform"
    band_px: int = 8
    smooth_points: int | None = None     # None: one per masked ray
    # losses
    w_rgb: float = 10.0
    w_d: float = 1.0
    w_sdf: float = 10.0
    w_fs: float = 1.0
    w_eik: float = 0.1
    w_smooth: float = 0.1
    w_mask: float = 0.1
    eps_trunc: float | None = None
    alpha_fs: float = 5.0
    delta_std: float | None = None
    boost: float = 2.0
    boost_frac: float = 0.25
    eikonal_mode: str = "observed"
    # initialisation
    init_radius: float | None = None     # None: half of the box half-extent
    init_center: tuple = (0.0, 0.0, 0.0)
    init_steps: int = 600
    # bookkeeping
    checkpoint_every: int = 500
    log_every: int = 50
    debug_every: int = 0
    debug_frame: int = 0
    threads: int = 1

    def __post_init__(self):
        for name in ("steps", "rays", "n_uniform", "grid_resolution"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.per_round < 0 or self.rounds < 0:
            raise ValueError("importance sampling counts must be non-negative")
        if len(self.grid_fracs) != self.grid_doublings:
            raise ValueError("need one step fraction per grid doubling")
        if list(self.grid_fracs) != sorted(self.grid_fracs):
            raise ValueError("grid fractions must be ascending")
        if self.ray_sampling not in ("mask_band", "uniform"):
            raise ValueError(f"unknown ray sampling '{self.ray_sampling}'")
        if self.lr <= 0 or self.lr_grid <= 0 or self.lr_lambda <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        self.loss_config()   # validates loss fields

    @property
    def samples_per_ray(self) -> int:
        return self.n_uniform + self.rounds * self.per_round

    @property
    def max_resolution(self) -> int:
        return self.grid_resolution * 2 ** self.grid_doublings

    @property
    def sphere_radius(self) -> float:
        if self.init_radius is not None:
            return self.init_radius
        return 0.25 * float(np.min(self.box_extent))

    @property
    def finest_cell(self) -> float:
        return float(np.max(self.box_extent)) / self.max_resolution

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            grid_resolution=self.grid_resolution, grid_max_resolution=self.max_resolution,
            separate_color_grid=self.separate_color_grid, box_origin=tuple(self.box_origin),
            box_extent=tuple(self.box_extent), ambient_dim=self.ambient_dim, z_dim=self.z_dim,
            app_dim=self.app_dim, pe_bands=self.pe_bands, deform_width=self.deform_width,
            deform_depth=self.deform_depth, deform_skip=self.deform_skip, decoder_width=self.decoder_width,
            decoder_depth=self.decoder_depth, dtype=self.dtype)

    def render_config(self) -> RenderConfig:
        return RenderConfig(self.n_uniform, self.per_round, self.rounds, self.sample_floor, self.last_alpha,
                            canonical_grad=self.eikonal_mode == "canonical")

    def loss_config(self) -> LossConfig:
        return LossConfig(self.w_rgb, self.w_d, self.w_sdf, self.w_fs, self.w_eik, self.w_smooth, self.w_mask,
                          self.eps_trunc if self.eps_trunc is not None else 2.5 * self.finest_cell,
                          self.alpha_fs,
                          self.delta_std if self.delta_std is not None else 0.01 * float(np.max(self.box_extent)),
                          self.boost, self.boost_frac, eikonal_mode=self.eikonal_mode)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Digest of everything except bookkeeping fields that do not change results."""
        d = self.to_dict()
        for k in ("checkpoint_every", "log_every", "debug_every", "debug_frame", "threads"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=list).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        fixed = {}
        for k, v in d.items():
            if isinstance(v, list):
                v = tuple(v)
            fixed[k] = v
        return cls(**fixed)

    @classmethod
    def full_scale(cls, **kw) -> "TrainConfig":
        """Original-scale settings: 35^3 grid doubled twice, 1024 rays, 80k steps, full-size networks."""
        base = dict(steps=80000, rays=1024, grid_resolution=35, deform_width=128, deform_depth=6, deform_skip=4,
                    dtype="float64", checkpoint_every=5000, log_every=100)
        base.update(kw)
        return cls(**base)


def parse_value(field_type, text: str):
    """Convert a command-line string to a config value of the field's type."""
    t = str(field_type)
    low = text.strip().lower()
    if low in ("none", "null") and "None" in t:
        return None
    if t.startswith("bool") or t == "<class 'bool'>":
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text}")
    if t.startswith("tuple"):
        return tuple(float(x) for x in text.replace("(", "").replace(")", "").split(",") if x.strip())
    if t.startswith("int"):
        return int(text)
    if t.startswith("float"):
        return float(text)
    return text


def apply_overrides(cfg_dict: dict, overrides: dict[str, str]) -> dict:
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    out = dict(cfg_dict)
    for k, v in overrides.items():
        key = k.replace("-", "_")
        if key not in types:
            raise ValueError(f"unknown config key '{k}'")
        out[key] = parse_value(types[key], v)
    return out


@dataclass
class ScheduleState:
    grid_level: int
    window_alpha: float
    multipliers: dict
    lambda_max: float
    lr_factor: float = 1.0


def schedule(step: int, cfg: TrainConfig) -> ScheduleState:
    """Schedule at `step`: grid level, PE window, loss multipliers, sharpness clamp, learning-rate factor."""
    if not 0 <= step < cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps})")
    frac = step / cfg.steps
    level = sum(1 for f in cfg.grid_fracs if step >= int(round(f * cfg.steps)))
    if cfg.pe_ramp_frac > 0:
        window = cfg.pe_bands * min(frac / cfg.pe_ramp_frac, 1.0)
    else:
        window = float(cfg.pe_bands)
    return ScheduleState(level, window, cfg.loss_config().multipliers(frac), cfg.lambda_max, cfg.lr_decay ** frac)
