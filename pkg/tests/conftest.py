import warnings

import numpy as np
import pytest
from hypothesis import settings

from dynsurf.model import DynamicSurfModel, ModelConfig
from dynsurf import canonical

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def small_model(seed=0, dtype="float64", n_frames=2, **kw):
    cfg = dict(grid_resolution=16, grid_max_resolution=64, deform_width=32, deform_depth=3, deform_skip=None,
               z_dim=8, app_dim=8, pe_bands=4, dtype=dtype)
    cfg.update(kw)
    return DynamicSurfModel(ModelConfig(**cfg), n_frames, np.random.default_rng(seed))


@pytest.fixture(scope="session")
def sphere_model():
    """Identity-deformation model whose geometry is fitted to a radius-0.3 sphere at the origin."""
    m = small_model(seed=3, grid_resolution=24, grid_max_resolution=96)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = canonical.sphere_init(m.grid, m.geo_decoder, (0.0, 0.0, 0.0), 0.3, steps=600,
                                       rng=np.random.default_rng(4), channels=m.geo_slice)
    m.init_report = report
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
