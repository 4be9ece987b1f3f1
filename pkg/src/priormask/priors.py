"""Shape-prior knowledge base: canonical 32x32 masks clustered with k-means."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import bilinear_matrix

CANONICAL_SIDE = 32
AGNOSTIC_KEY = -1
BANK_MAGIC = b"SMPB1"
MODES = ("class-specific", "class-agnostic")


@dataclass
class Mask:
    """Binary instance mask in image coordinates."""

    bits: np.ndarray
    class_id: int

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def area(self) -> int:
        return int(self.bits.sum())


@dataclass
class PriorBank:
    mode: str
    priors: dict[int, np.ndarray] = field(default_factory=dict)  # key -> (K, 32, 32)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown prior bank mode {self.mode!r}; expected one of {MODES}")

    @property
    def agnostic(self) -> bool:
        return self.mode == "class-agnostic"

    @property
    def K(self) -> int:
        return next(iter(self.priors.values())).shape[0]

    def total_priors(self) -> int:
        return sum(p.shape[0] for p in self.priors.values())

    def priors_for(self, class_id: int | None) -> np.ndarray:
        if self.agnostic:
            return self.priors[AGNOSTIC_KEY]
        if class_id is None:
            raise ValueError("class-specific prior bank needs a class id")
        if class_id not in self.priors:
            raise KeyError(f"class {class_id} not in prior bank (known: {sorted(self.priors)})")
        return self.priors[class_id]

    def __eq__(self, other):
        if not isinstance(other, PriorBank) or self.mode != other.mode:
            return False
        if sorted(self.priors) != sorted(other.priors):
            return False
        return all(np.array_equal(self.priors[k], other.priors[k]) for k in self.priors)


def tight_bounds(bits: np.ndarray) -> tuple[int, int, int, int]:
    """(row0, row1, col0, col1) half-open bounds of the foreground."""
    rows = np.flatnonzero(bits.any(axis=1))
    cols = np.flatnonzero(bits.any(axis=0))
    if rows.size == 0:
        raise ValueError("mask has no foreground pixels")
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def canonicalize(mask: Mask | np.ndarray, side: int = CANONICAL_SIDE) -> np.ndarray:
    """Crop to the tight box and stretch bilinearly to ``side`` x ``side``."""
    bits = mask.bits if isinstance(mask, Mask) else np.asarray(mask, dtype=bool)
    r0, r1, c0, c1 = tight_bounds(bits)
    crop = bits[r0:r1, c0:c1].astype(np.float64)
    out = bilinear_matrix(crop.shape[0], side) @ crop @ bilinear_matrix(crop.shape[1], side).T
    return np.clip(out, 0.0, 1.0)


def _sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = (points * points).sum(1)[:, None] - 2.0 * points @ centroids.T + (centroids * centroids).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    closest = _sq_distances(points, centers[:1])[:, 0]
    for i in range(1, k):
        tot = closest.sum()
        if tot <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / tot)
        centers[i] = points[idx]
        closest = np.minimum(closest, _sq_distances(points, centers[i:i + 1])[:, 0])
    return centers


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    history: list[float]
    n_iter: int


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    """Lloyd iterations from a k-means++ start.

    ``history`` holds the inertia after each assignment step; it never increases.
    An emptied cluster is re-seeded with the point farthest from its own centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if n < k:
        raise ValueError(f"kmeans needs at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)
    centroids = kmeans_pp_init(points, k, rng)
    labels = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_distances(points, centroids)
        new_labels = d.argmin(axis=1)
        history.append(float(d[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = points[members].mean(axis=0)
        for j in range(k):
            if not (labels == j).any():
                own = d[np.arange(n), labels]
                # only steal from clusters that keep at least one other member
                sizes = np.bincount(labels, minlength=k)
                own = np.where(sizes[labels] > 1, own, -1.0)
                far = int(own.argmax())
                labels[far] = j
                centroids[j] = points[far]
                for jj in np.unique(labels):
                    centroids[jj] = points[labels == jj].mean(axis=0)
    d = _sq_distances(points, centroids)
    labels = d.argmin(axis=1)
    inertia = float(d[np.arange(n), labels].sum())
    return KMeansResult(centroids, labels, inertia, history, it)


def build_prior_bank(masks: list[Mask], mode: str = "class-agnostic", k: int = 12, seed: int = 0,
                     max_iter: int = 100) -> PriorBank:
    if mode not in MODES:
        raise ValueError(f"unknown prior bank mode {mode!r}; expected one of {MODES}")
    groups: dict[int, list[np.ndarray]] = {}
    for m in masks:
        key = AGNOSTIC_KEY if mode == "class-agnostic" else int(m.class_id)
        groups.setdefault(key, []).append(canonicalize(m).reshape(-1))
    if not groups:
        raise ValueError("no masks given to build_prior_bank")
    short = sorted(key for key, g in groups.items() if len(g) < k)
    if short:
        counts = ", ".join(f"class {key}: {len(groups[key])}" for key in short)
        raise ValueError(f"insufficient masks for K={k} ({counts})")
    bank = PriorBank(mode)
    for key in sorted(groups):
        res = kmeans(np.stack(groups[key]), k, seed=seed, max_iter=max_iter)
        bank.priors[key] = np.clip(res.centroids, 0.0, 1.0).reshape(k, CANONICAL_SIDE, CANONICAL_SIDE)
    return bank


def save_bank(bank: PriorBank, path) -> None:
    """Layout (little-endian): magic, mode byte, key count, then per key: class id, K, K*32*32 float64."""
    parts = [BANK_MAGIC, struct.pack("<BI", MODES.index(bank.mode), len(bank.priors))]
    for key in sorted(bank.priors):
        grids = np.ascontiguousarray(bank.priors[key], dtype="<f8")
        parts.append(struct.pack("<iI", key, grids.shape[0]))
        parts.append(grids.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_bank(path) -> PriorBank:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read prior bank {path}: {exc}") from exc
    try:
        if raw[:5] != BANK_MAGIC:
            raise ValueError("bad magic")
        mode_idx, n_keys = struct.unpack_from("<BI", raw, 5)
        off = 10
        priors = {}
        grid_bytes = CANONICAL_SIDE * CANONICAL_SIDE * 8
        for _ in range(n_keys):
            key, k = struct.unpack_from("<iI", raw, off)
            off += 8
            if off + k * grid_bytes > len(raw):
                raise ValueError("truncated prior grids")
            grids = np.frombuffer(raw, dtype="<f8", count=k * CANONICAL_SIDE ** 2, offset=off)
            priors[key] = grids.reshape(k, CANONICAL_SIDE, CANONICAL_SIDE).astype(np.float64)
            off += k * grid_bytes
        if off != len(raw):
            raise ValueError("trailing bytes")
        return PriorBank(MODES[mode_idx], priors)
    except (struct.error, ValueError, IndexError) as exc:
        raise ValueError(f"corrupt prior bank file {path}: {exc}") from exc
