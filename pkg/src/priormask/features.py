"""Fixed (untrained) feature pyramid standing in for the detector backbone.

Level k is the image average-pooled by 2**k.  Each cell carries a handful of
local appearance statistics, which a seeded orthonormal map lifts to the mask
branch's channel width D.  Cells outside the image are zero after cropping.
"""
from __future__ import annotations

import numpy as np
from scipy.ndimage import uniform_filter

N_BASE_FEATURES = 11


def avg_pool(img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return img
    h, w = img.shape[:2]
    return img.reshape(h // factor, factor, w // factor, factor, -1).mean(axis=(1, 3))


def base_features(level_img: np.ndarray) -> np.ndarray:
    """(H, W, 3) pooled image -> (H, W, 11): colour, 3x3 and 7x7 local means, edge strength, texture."""
    rgb = level_img.astype(np.float64)
    m3 = uniform_filter(rgb, size=(3, 3, 1), mode="nearest")
    m7 = uniform_filter(rgb, size=(7, 7, 1), mode="nearest")
    lum = rgb.mean(axis=2)
    gy, gx = np.gradient(lum)
    edge = np.hypot(gx, gy)
    var = uniform_filter(lum * lum, size=3, mode="nearest") - uniform_filter(lum, size=3, mode="nearest") ** 2
    tex = np.sqrt(np.maximum(var, 0.0))
    return np.concatenate([
        3.0 * (rgb - 0.5),
        3.0 * (m3 - 0.5),
        3.0 * (m7 - 0.5),
        6.0 * edge[..., None],
        6.0 * tex[..., None],
    ], axis=2)


def projection(width: int, seed: int = 0) -> np.ndarray:
    """(11, D) map with orthonormal columns (D <= 11) or rows (D > 11)."""
    if width <= 0:
        raise ValueError(f"feature width must be positive, got {width}")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((max(width, N_BASE_FEATURES), min(width, N_BASE_FEATURES)))
    q, _ = np.linalg.qr(a)
    return q.T if width > N_BASE_FEATURES else q


def feature_pyramid(image: np.ndarray, levels, width: int, seed: int = 0) -> dict[int, np.ndarray]:
    proj = projection(width, seed)
    return {k: base_features(avg_pool(image, 2 ** k)) @ proj for k in levels}
