"""Procedural test scenes: sharp piecewise-constant transmission layers and
Gaussian-blurred reflection layers."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter


def random_scene(rng: np.random.Generator, height: int = 64, width: int = 64,
                 shapes: int = 12) -> np.ndarray:
    """RGB image of overlapping flat-coloured rectangles and discs on a flat background."""
    img = np.empty((height, width, 3))
    img[:] = rng.uniform(0, 1, 3)
    yy, xx = np.mgrid[:height, :width]
    for _ in range(shapes):
        colour = rng.uniform(0, 1, 3)
        if rng.random() < 0.5:
            y0, x0 = rng.integers(0, height), rng.integers(0, width)
            hh = rng.integers(4, max(5, height // 2))
            ww = rng.integers(4, max(5, width // 2))
            mask = (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)
        else:
            cy, cx = rng.uniform(0, height), rng.uniform(0, width)
            radius = rng.uniform(3, max(3.5, min(height, width) / 4))
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < radius**2
        img[mask] = colour
    return img


def layer_pair(seed: int, height: int = 64, width: int = 64, blur_sigma: float = 3.0):
    """(T, R): a sharp scene and an independent scene blurred with ``blur_sigma``."""
    rng = np.random.default_rng(seed)
    t = random_scene(rng, height, width)
    r = gaussian_filter(random_scene(rng, height, width), sigma=(blur_sigma, blur_sigma, 0))
    return t, np.clip(r, 0.0, 1.0)
