"""The full learnable model: deformation field + canonical grid/decoders + frame codes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import canonical
from .canonical import COLOR_CHANNELS, GEO_CHANNELS, ColorDecoder, FeatureGrid, GeometryDecoder
from .deform import DeformationField, FrameCodes
from .diffmath import Dual, Var, no_grad, tape


@dataclass
class ModelConfig:
    grid_resolution: int = 24
    grid_max_resolution: int = 96
    grid_init_std: float = 1e-2
    channels: int = GEO_CHANNELS + COLOR_CHANNELS
    color_channels: int = COLOR_CHANNELS
    separate_color_grid: bool = False
    box_origin: tuple = (-0.5, -0.5, -0.5)
    box_extent: tuple = (1.0, 1.0, 1.0)
    ambient_dim: int = 2
    z_dim: int = 64
    app_dim: int = 32
    code_std: float = 0.01
    pe_bands: int = 6
    deform_width: int = 128
    deform_depth: int = 6
    deform_skip: int | None = 4
    deform_mode: str = "se3"
    decoder_width: int = 64
    decoder_depth: int = 2
    geo_beta: float = 100.0
    color_uses_ambient: bool = False
    lambda_init: float | None = None
    dtype: str = "float64"

    @property
    def geo_channels(self) -> int:
        return self.channels - self.color_channels


PARAM_CLASSES = ("grid", "decoders", "deform", "codes", "lambda")


class DynamicSurfModel:
    def __init__(self, cfg: ModelConfig, n_frames: int, rng: np.random.Generator):
        self.cfg = cfg
        dt = np.dtype(cfg.dtype)
        self.dtype = dt
        self.n_frames = n_frames
        geo = cfg.geo_channels
        if cfg.separate_color_grid:
            self.grid = canonical.create_grid(cfg.grid_resolution, geo, cfg.box_origin, cfg.box_extent, rng,
                                              cfg.grid_init_std, dt, cfg.grid_max_resolution)
            self.color_grid = canonical.create_grid(cfg.grid_resolution, cfg.color_channels, cfg.box_origin,
                                                    cfg.box_extent, rng, cfg.grid_init_std, dt,
                                                    cfg.grid_max_resolution)
            self.color_grid.values.name = "color_grid"
            self.color_slice = (0, cfg.color_channels)
        else:
            self.grid = canonical.create_grid(cfg.grid_resolution, cfg.channels, cfg.box_origin, cfg.box_extent,
                                              rng, cfg.grid_init_std, dt, cfg.grid_max_resolution)
            self.color_grid = self.grid
            self.color_slice = (geo, cfg.channels)
        self.geo_slice = (0, geo)
        self.field = DeformationField(rng, cfg.ambient_dim, cfg.z_dim, cfg.pe_bands, cfg.deform_width,
                                      cfg.deform_depth, cfg.deform_skip, cfg.deform_mode, dt)
        self.geo_decoder = GeometryDecoder(geo, cfg.ambient_dim, rng, cfg.decoder_width, cfg.decoder_depth,
                                           cfg.geo_beta, dt)
        self.color_decoder = ColorDecoder(cfg.color_channels, cfg.app_dim, rng, cfg.decoder_width,
                                          cfg.decoder_depth, cfg.ambient_dim if cfg.color_uses_ambient else 0, dt)
        lam0 = cfg.lambda_init or 1.0 / (2.0 * float(np.max(self.grid.cell_size)))
        self.sharpness = canonical.RenderSharpness(lam0, dt)
        self.codes_z = Var(rng.normal(0, cfg.code_std, (n_frames, cfg.z_dim)).astype(dt), requires_grad=True,
                           name="codes.z")
        self.codes_app = Var(rng.normal(0, cfg.code_std, (n_frames, cfg.app_dim)).astype(dt),
                             requires_grad=True, name="codes.app")

    # parameters --------------------------------------------------------------
    def grids(self) -> list[FeatureGrid]:
        return [self.grid] if self.color_grid is self.grid else [self.grid, self.color_grid]

    def param_groups(self) -> dict[str, list[Var]]:
        return {
            "grid": [g.values for g in self.grids()],
            "decoders": self.geo_decoder.params() + self.color_decoder.params(),
            "deform": self.field.params(),
            "codes": [self.codes_z, self.codes_app],
            "lambda": [self.sharpness.log_lam],
        }

    def named_params(self) -> dict[str, Var]:
        out = {}
        for group in self.param_groups().values():
            for v in group:
                out[v.name] = v
        return out

    def upsample(self) -> None:
        shared = self.color_grid is self.grid
        self.grid = canonical.upsample_grid(self.grid)
        self.color_grid = self.grid if shared else canonical.upsample_grid(self.color_grid)

    @property
    def lam(self) -> Var:
        return self.sharpness.value()

    def codes(self, t: int) -> FrameCodes:
        return FrameCodes(self.codes_z[t], self.codes_app[t])

    # evaluation --------------------------------------------------------------
    def as_dual(self, x, tangents: bool) -> Dual:
        x = np.asarray(x, dtype=self.dtype)
        return Dual.seed(x) if tangents else Dual.const(x)

    def sdf(self, x: Dual, codes: FrameCodes):
        """phi of observed points: returns (phi (K, M, 1), x_canon, w, oob)."""
        x_canon, w = self.field(x, codes.z)
        phi, oob = canonical.sdf_query(x_canon, w, self.grid, self.geo_decoder, self.geo_slice)
        return phi, x_canon, w, oob

    def sdf_canonical(self, x_canon: Dual, w: Dual | None):
        return canonical.sdf_query(x_canon, w, self.grid, self.geo_decoder, self.geo_slice)

    def color(self, x_canon: Dual, d_c: Var, normal: Var, codes: FrameCodes, w: Dual | None = None) -> Var:
        wv = w.value if (w is not None and self.color_decoder.ambient_dim) else None
        return canonical.color_query(x_canon, d_c, normal, codes.app, self.color_grid, self.color_decoder,
                                     self.color_slice, wv)

    def sdf_grad(self, points, codes: FrameCodes) -> tuple[Var, np.ndarray]:
        """Gradient of phi w.r.t. observed points, as an (M, 3) tape node."""
        phi, _, _, oob = self.sdf(self.as_dual(points, True), codes)
        return tape.transpose(phi.var[1:, :, 0]), oob

    def sdf_values(self, points, t: int, chunk: int = 65536) -> np.ndarray:
        """phi at observed points for frame t (no tape)."""
        points = np.asarray(points, dtype=self.dtype).reshape(-1, 3)
        out = np.empty(len(points), dtype=np.float64)
        with no_grad():
            codes = self.codes(t)
            for s in range(0, len(points), chunk):
                phi, *_ = self.sdf(Dual.const(points[s:s + chunk]), codes)
                out[s:s + chunk] = phi.var.data[0, :, 0]
        return out

    def normals(self, points, t: int, chunk: int = 16384) -> np.ndarray:
        """Normal (gradient of phi through the deformation) at observed points."""
        points = np.asarray(points, dtype=self.dtype).reshape(-1, 3)
        out = np.empty((len(points), 3), dtype=np.float64)
        with no_grad():
            codes = self.codes(t)
            for s in range(0, len(points), chunk):
                phi, *_ = self.sdf(Dual.seed(points[s:s + chunk]), codes)
                out[s:s + chunk] = phi.var.data[1:, :, 0].T
        return out


def canonical_normal(model: DynamicSurfModel, x, codes: FrameCodes) -> np.ndarray:
    """Gradient of the composite SDF w.r.t. the observed point, by forward mode."""
    x = np.atleast_2d(np.asarray(x, dtype=model.dtype))
    with no_grad():
        phi, *_ = model.sdf(Dual.seed(x), codes)
    n = phi.var.data[1:, :, 0].T
    return n[0] if np.ndim(x) == 1 else n
