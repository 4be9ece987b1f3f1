"""Procedural multi-class shapes dataset with visible-region instance masks.

Six classes, each with its own shape family and colour palette.  Instances are
painted back to front, so a mask holds only the pixels still visible after
later instances are drawn.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .priors import Mask, tight_bounds
from .roi import Box, PatchSpec

DATASET_MAGIC = b"SMDS1"

CLASS_NAMES = ("disk", "rectangle", "cross", "ellipse", "triangle", "ring")
CLASS_IDS = {name: i for i, name in enumerate(CLASS_NAMES)}

# mean RGB per class; per-instance jitter and pixel noise are added on top
CLASS_COLORS = {
    "disk": (0.85, 0.25, 0.25),
    "rectangle": (0.25, 0.75, 0.30),
    "cross": (0.25, 0.35, 0.90),
    "ellipse": (0.90, 0.60, 0.15),
    "triangle": (0.65, 0.30, 0.80),
    "ring": (0.20, 0.80, 0.80),
}
COLOR_JITTER = 0.2  # per-instance uniform offset on each channel of the class colour


@dataclass
class Instance:
    mask: Mask
    box: Box
    class_id: int


@dataclass
class Scene:
    image: np.ndarray  # (L, L, 3) float32 in [0, 1]
    instances: list[Instance] = field(default_factory=list)

    @property
    def side(self) -> int:
        return self.image.shape[0]


@dataclass(frozen=True)
class SplitSpec:
    seen_mask_classes: frozenset
    novel_classes: frozenset

    def __post_init__(self):
        if self.seen_mask_classes & self.novel_classes:
            raise ValueError("seen and novel class sets must be disjoint")

    @classmethod
    def default(cls) -> "SplitSpec":
        seen = {CLASS_IDS[n] for n in ("disk", "rectangle", "cross")}
        novel = {CLASS_IDS[n] for n in ("ellipse", "triangle", "ring")}
        return cls(frozenset(seen), frozenset(novel))

    @classmethod
    def oracle(cls, classes=range(len(CLASS_NAMES))) -> "SplitSpec":
        return cls(frozenset(classes), frozenset())

    @property
    def all_classes(self) -> frozenset:
        return self.seen_mask_classes | self.novel_classes


def _rotate(x, y, theta):
    c, s = math.cos(theta), math.sin(theta)
    return c * x + s * y, -s * x + c * y


def shape_mask(name: str, side: int, cx: float, cy: float, size: float, rng: np.random.Generator) -> np.ndarray:
    """Pixel-centre rasterisation of one shape; ``size`` is the nominal diameter in pixels.

    Parameter distributions per class (r = size / 2):
      disk       radius r
      ellipse    semi-axes r and r*U(0.45, 0.7), rotation U(0, pi)
      rectangle  half-sides r and r*U(0.45, 1.0), rotation U(-pi/6, pi/6)
      cross      arm half-length r, arm half-width r*U(0.25, 0.4), rotation U(-pi/8, pi/8)
      triangle   isosceles, half-base r*U(0.8, 1.0), height 2r, rotation U(-pi/8, pi/8)
      ring       outer radius r, inner radius r*U(0.45, 0.6)
    """
    yy, xx = np.mgrid[0:side, 0:side]
    x = xx + 0.5 - cx
    y = yy + 0.5 - cy
    r = size / 2
    if name == "disk":
        return x * x + y * y <= r * r
    if name == "ring":
        inner = r * rng.uniform(0.45, 0.6)
        d2 = x * x + y * y
        return (d2 <= r * r) & (d2 >= inner * inner)
    if name == "ellipse":
        b = r * rng.uniform(0.45, 0.7)
        u, v = _rotate(x, y, rng.uniform(0, math.pi))
        return (u / r) ** 2 + (v / b) ** 2 <= 1.0
    if name == "rectangle":
        b = r * rng.uniform(0.45, 1.0)
        u, v = _rotate(x, y, rng.uniform(-math.pi / 6, math.pi / 6))
        return (np.abs(u) <= r) & (np.abs(v) <= b)
    if name == "cross":
        t = r * rng.uniform(0.25, 0.4)
        u, v = _rotate(x, y, rng.uniform(-math.pi / 8, math.pi / 8))
        au, av = np.abs(u), np.abs(v)
        return ((au <= r) & (av <= t)) | ((av <= r) & (au <= t))
    if name == "triangle":
        half = r * rng.uniform(0.8, 1.0)
        u, v = _rotate(x, y, rng.uniform(-math.pi / 8, math.pi / 8))
        # apex at v = -r, base at v = +r
        frac = (v + r) / (2 * r)
        return (frac >= 0) & (frac <= 1) & (np.abs(u) <= half * frac)
    raise ValueError(f"unknown shape class {name!r}")


def _smooth_noise(side: int, cell: int, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.uniform(-1, 1, (side // cell + 2, side // cell + 2))
    up = np.kron(coarse, np.ones((cell, cell)))
    return up[:side, :side]


def _background(side: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.25, 0.65, 3)
    base = base.mean() + 0.35 * (base - base.mean())  # low saturation
    img = np.empty((side, side, 3))
    blob = _smooth_noise(side, 16, rng)
    for ch in range(3):
        img[..., ch] = base[ch] + 0.08 * blob + 0.05 * rng.standard_normal((side, side))
    return img


def generate_scene(rng: np.random.Generator, classes: tuple[str, ...], n_instances: int, side: int,
                   size_range: tuple[float, float]) -> Scene:
    img = _background(side, rng)
    placed: list[tuple[np.ndarray, int]] = []
    for _ in range(n_instances):
        name = classes[rng.integers(len(classes))]
        for _attempt in range(20):
            size = rng.uniform(*size_range)
            margin = size / 2
            cx = rng.uniform(margin, side - margin)
            cy = rng.uniform(margin, side - margin)
            bits = shape_mask(name, side, cx, cy, size, rng)
            # keep earlier instances at least half visible
            if bits.any() and all((m & ~bits).sum() >= 0.5 * m.sum() for m, _ in placed):
                break
        else:
            continue
        color = np.asarray(CLASS_COLORS[name]) + rng.uniform(-COLOR_JITTER, COLOR_JITTER, 3)
        tex = 0.06 * _smooth_noise(side, 4, rng)
        for ch in range(3):
            layer = color[ch] + tex + 0.05 * rng.standard_normal((side, side))
            img[..., ch] = np.where(bits, layer, img[..., ch])
        placed = [(m & ~bits, c) for m, c in placed]
        placed.append((bits, CLASS_IDS[name]))
    instances = []
    for bits, cid in placed:
        if not bits.any():
            continue
        r0, r1, c0, c1 = tight_bounds(bits)
        instances.append(Instance(Mask(bits, cid), Box.from_corners(c0, r0, c1, r1), cid))
    return Scene(np.clip(img, 0.0, 1.0).astype(np.float32), instances)


def generate_dataset(n_scenes: int, classes=CLASS_NAMES, instances_per_scene_range=(1, 4), seed: int = 0,
                     side: int = 256, size_range: tuple[float, float] | None = None) -> list[Scene]:
    """Deterministic given ``seed``; scene i draws from its own child stream of the seed."""
    if n_scenes <= 0:
        raise ValueError(f"n_scenes must be positive, got {n_scenes}")
    classes = tuple(classes)
    if not classes:
        raise ValueError("dataset needs at least one class")
    for name in classes:
        if name not in CLASS_IDS:
            raise ValueError(f"unknown class {name!r}")
    lo, hi = instances_per_scene_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad instances_per_scene_range {instances_per_scene_range}")
    if size_range is None:
        size_range = (0.11 * side, 0.43 * side)
    streams = np.random.SeedSequence(seed).spawn(n_scenes)
    scenes = []
    for ss in streams:
        rng = np.random.default_rng(ss)
        n = int(rng.integers(lo, hi + 1))
        scenes.append(generate_scene(rng, classes, n, side, size_range))
    return scenes


def render_gt_at(mask: Mask, spec: PatchSpec, out_side: int) -> np.ndarray:
    """Binary groundtruth in patch coordinates at ``out_side`` resolution.

    An output cell is foreground when more than half of its area is covered by
    mask pixels; pixels outside the image count as background.
    """
    cell = Fraction(spec.side * spec.scale, out_side)  # image pixels per output cell
    up, block = cell.denominator, cell.numerator
    x0 = spec.col0 * spec.scale
    y0 = spec.row0 * spec.scale
    span = spec.side * spec.scale
    out = np.zeros((span, span))
    r_lo, r_hi = max(y0, 0), min(y0 + span, mask.height)
    c_lo, c_hi = max(x0, 0), min(x0 + span, mask.width)
    if r_lo < r_hi and c_lo < c_hi:
        out[r_lo - y0:r_hi - y0, c_lo - x0:c_hi - x0] = mask.bits[r_lo:r_hi, c_lo:c_hi]
    if up > 1:
        out = np.repeat(np.repeat(out, up, axis=0), up, axis=1)
    n = out.shape[0] // block
    cover = out.reshape(n, block, n, block).mean(axis=(1, 3))
    return (cover > 0.5).astype(np.float64)


def rle_encode(bits: np.ndarray) -> np.ndarray:
    """Row-major run lengths, alternating background/foreground, starting with background."""
    flat = np.asarray(bits, dtype=bool).reshape(-1)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(edges)
    if flat.size and flat[0]:
        runs = np.concatenate(([0], runs))
    return runs.astype(np.uint32)


def rle_decode(runs: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    runs = np.asarray(runs, dtype=np.int64)
    if runs.sum() != shape[0] * shape[1]:
        raise ValueError(f"run lengths sum to {runs.sum()}, expected {shape[0] * shape[1]}")
    values = np.arange(runs.size) % 2 == 1
    return np.repeat(values, runs).reshape(shape)


def save_dataset(scenes: list[Scene], path, class_names=CLASS_NAMES) -> None:
    """Little-endian: magic, L, n_scenes, class table, then per scene the image as
    three float32 planes, instance count, and per instance class id, box
    (x_c, y_c, w, h as float32) and the run-length-encoded mask."""
    if not scenes:
        raise ValueError("cannot save an empty dataset")
    side = scenes[0].side
    parts = [DATASET_MAGIC, struct.pack("<III", side, len(scenes), len(class_names))]
    for cid, name in enumerate(class_names):
        raw = name.encode()
        parts.append(struct.pack("<IH", cid, len(raw)) + raw)
    for sc in scenes:
        if sc.side != side:
            raise ValueError("all scenes must share one image side")
        planes = np.ascontiguousarray(sc.image.transpose(2, 0, 1), dtype="<f4")
        parts.append(planes.tobytes())
        parts.append(struct.pack("<I", len(sc.instances)))
        for inst in sc.instances:
            runs = rle_encode(inst.mask.bits)
            parts.append(struct.pack("<I4fI", inst.class_id, *inst.box.as_tuple(), runs.size))
            parts.append(runs.astype("<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path) -> list[Scene]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read dataset {path}: {exc}") from exc
    try:
        if raw[:5] != DATASET_MAGIC:
            raise ValueError("bad magic")
        side, n_scenes, n_classes = struct.unpack_from("<III", raw, 5)
        off = 17
        for _ in range(n_classes):
            _cid, n = struct.unpack_from("<IH", raw, off)
            off += 6 + n
        plane_bytes = 3 * side * side * 4
        scenes = []
        for _ in range(n_scenes):
            if off + plane_bytes > len(raw):
                raise ValueError("truncated image")
            img = np.frombuffer(raw, dtype="<f4", count=3 * side * side, offset=off)
            img = img.reshape(3, side, side).transpose(1, 2, 0).astype(np.float32)
            off += plane_bytes
            (n_inst,) = struct.unpack_from("<I", raw, off)
            off += 4
            insts = []
            for _ in range(n_inst):
                cid, xc, yc, w, h, n_runs = struct.unpack_from("<I4fI", raw, off)
                off += 24
                if off + 4 * n_runs > len(raw):
                    raise ValueError("truncated mask")
                runs = np.frombuffer(raw, dtype="<u4", count=n_runs, offset=off)
                off += 4 * n_runs
                insts.append(Instance(Mask(rle_decode(runs, (side, side)), cid), Box(xc, yc, w, h), cid))
            scenes.append(Scene(img, insts))
        if off != len(raw):
            raise ValueError("trailing bytes")
        return scenes
    except (struct.error, ValueError) as exc:
        raise ValueError(f"corrupt dataset file {path}: {exc}") from exc
