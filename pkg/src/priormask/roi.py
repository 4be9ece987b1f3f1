"""Box geometry: level assignment, box perturbation, patch cropping and box/shape rasterisation.

Coordinates are continuous image coordinates; pixel (row i, col j) covers
[j, j+1) x [i, i+1) and has its centre at (j + 0.5, i + 0.5).  A pyramid level k
has cells of side 2**k image pixels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import bilinear_matrix


@dataclass(frozen=True)
class Box:
    x_c: float
    y_c: float
    w: float
    h: float

    @property
    def x0(self):
        return self.x_c - self.w / 2

    @property
    def x1(self):
        return self.x_c + self.w / 2

    @property
    def y0(self):
        return self.y_c - self.h / 2

    @property
    def y1(self):
        return self.y_c + self.h / 2

    @classmethod
    def from_corners(cls, x0, y0, x1, y1) -> "Box":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def as_tuple(self):
        return (self.x_c, self.y_c, self.w, self.h)


@dataclass(frozen=True)
class PatchSpec:
    level: int
    row0: int  # patch origin in level cells
    col0: int
    side: int

    @property
    def scale(self) -> int:
        return 2 ** self.level

    def to_patch(self, x, y):
        """Image coordinates -> continuous patch-cell coordinates."""
        return x / self.scale - self.col0, y / self.scale - self.row0

    def box_in_patch(self, box: Box):
        px0, py0 = self.to_patch(box.x0, box.y0)
        px1, py1 = self.to_patch(box.x1, box.y1)
        return px0, py0, px1, py1


def assign_level(box: Box, image_side: int, max_level: int, min_level: int) -> int:
    if box.w <= 0 or box.h <= 0:
        raise ValueError(f"box dimensions must be positive, got w={box.w}, h={box.h}")
    k = max_level - math.floor(math.log2(image_side / max(box.w, box.h)))
    return int(min(max(k, min_level), max_level))


def jitter_box(box: Box, sigma: float, rng) -> Box:
    """Gaussian shift of the centre (relative to size) and log-normal rescale of w, h.

    ``rng`` needs a ``normal(loc, scale, size)`` method.
    """
    if sigma == 0:
        return box
    dx, dy, dw, dh = rng.normal(0.0, sigma, 4)
    return Box(box.x_c + dx * box.w, box.y_c + dy * box.h, math.exp(dw) * box.w, math.exp(dh) * box.h)


def downsize_box(box: Box, lo: float, hi: float, rng) -> Box:
    if not 0 < lo <= hi <= 1:
        raise ValueError(f"downsize factors must satisfy 0 < lo <= hi <= 1, got {lo}, {hi}")
    sw, sh = rng.uniform(lo, hi, 2)
    return Box(box.x_c, box.y_c, sw * box.w, sh * box.h)


def patch_spec_for(box: Box, image_side: int, max_level: int, min_level: int) -> PatchSpec:
    side = image_side // 2 ** max_level
    k = assign_level(box, image_side, max_level, min_level)
    s = 2 ** k
    col0 = int(math.floor(box.x_c / s - side / 2 + 0.5))
    row0 = int(math.floor(box.y_c / s - side / 2 + 0.5))
    return PatchSpec(k, row0, col0, side)


def crop_with_zeros(arr: np.ndarray, row0: int, col0: int, h: int, w: int) -> np.ndarray:
    """Integer window of the two leading axes, zero where it leaves ``arr``."""
    out = np.zeros((h, w) + arr.shape[2:], dtype=arr.dtype)
    r_lo, r_hi = max(row0, 0), min(row0 + h, arr.shape[0])
    c_lo, c_hi = max(col0, 0), min(col0 + w, arr.shape[1])
    if r_lo < r_hi and c_lo < c_hi:
        out[r_lo - row0:r_hi - row0, c_lo - col0:c_hi - col0] = arr[r_lo:r_hi, c_lo:c_hi]
    return out


def extract_patch(pyramid: dict[int, np.ndarray], box: Box, image_side: int, max_level: int,
                  min_level: int) -> tuple[np.ndarray, PatchSpec]:
    spec = patch_spec_for(box, image_side, max_level, min_level)
    if spec.level not in pyramid:
        raise KeyError(f"feature pyramid has no level {spec.level} (levels: {sorted(pyramid)})")
    return crop_with_zeros(pyramid[spec.level], spec.row0, spec.col0, spec.side, spec.side), spec


def _check_overlap(box: Box, spec: PatchSpec):
    px0, py0, px1, py1 = spec.box_in_patch(box)
    if px1 <= 0 or py1 <= 0 or px0 >= spec.side or py0 >= spec.side:
        raise ValueError(f"box {box.as_tuple()} does not overlap patch {spec}")
    return px0, py0, px1, py1


def _inside(lo: float, hi: float, n: int) -> np.ndarray:
    centres = np.arange(n) + 0.5
    return (centres >= lo) & (centres < hi)


def rasterize_box_prior(box: Box, spec: PatchSpec) -> np.ndarray:
    """1 where a patch cell's centre lies in the box (half-open on the far edges)."""
    px0, py0, px1, py1 = _check_overlap(box, spec)
    return np.outer(_inside(py0, py1, spec.side), _inside(px0, px1, spec.side)).astype(np.float64)


def box_resize_matrix(lo: float, hi: float, n_src: int, n_out: int) -> np.ndarray:
    """(n_out, n_src) operator sampling a length-``n_src`` profile stretched over [lo, hi).

    Rows for cells whose centre falls outside the interval are zero.  With integer
    ``lo``/``hi`` the inside rows equal an align-corners-false resize to ``hi - lo``.
    """
    inside = _inside(lo, hi, n_out)
    src = (np.arange(n_out) + 0.5 - lo) * (n_src / (hi - lo)) - 0.5
    src = np.clip(src, 0.0, n_src - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_src - 1)
    frac = src - i0
    m = np.zeros((n_out, n_src))
    rows = np.flatnonzero(inside)
    np.add.at(m, (rows, i0[rows]), 1.0 - frac[rows])
    np.add.at(m, (rows, i1[rows]), frac[rows])
    return m


def fit_operators(box: Box, spec: PatchSpec, n_src: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Row and column operators so that ``rows @ S @ cols.T`` fits S into the box."""
    px0, py0, px1, py1 = _check_overlap(box, spec)
    return box_resize_matrix(py0, py1, n_src, spec.side), box_resize_matrix(px0, px1, n_src, spec.side)


def fit_shape_into_box(shape: np.ndarray, box: Box, spec: PatchSpec) -> np.ndarray:
    """Stretch a square shape map over the box footprint inside the patch; zero elsewhere."""
    shape = np.asarray(shape, dtype=np.float64)
    rows, cols = fit_operators(box, spec, shape.shape[-1])
    return np.clip(rows @ shape @ cols.T, 0.0, 1.0)


__all__ = [
    "Box", "PatchSpec", "assign_level", "jitter_box", "downsize_box", "patch_spec_for", "extract_patch",
    "rasterize_box_prior", "fit_shape_into_box", "fit_operators", "crop_with_zeros", "bilinear_matrix",
]
