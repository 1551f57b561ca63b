"""Image output for rendered frames."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from ..scene import DEPTH_SCALE


def save_render(directory: str, stem: str, rgb: np.ndarray, depth: np.ndarray, mask: np.ndarray) -> list[str]:
    """Write rgb (8-bit), z-depth (16-bit, same units as sequences) and mask (8-bit) images."""
    os.makedirs(directory, exist_ok=True)
    paths = [os.path.join(directory, f"{stem}_{k}.png") for k in ("color", "depth", "mask")]
    Image.fromarray(np.clip(np.round(rgb * 255), 0, 255).astype(np.uint8), "RGB").save(paths[0])
    Image.fromarray(np.clip(np.round(depth * DEPTH_SCALE), 0, 65535).astype(np.uint16)).save(paths[1])
    Image.fromarray(np.clip(np.round(mask * 255), 0, 255).astype(np.uint8), "L").save(paths[2])
    return paths
