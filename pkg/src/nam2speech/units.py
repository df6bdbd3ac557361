"""K-means codebook standing in for discrete self-supervised speech units."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import read_tensor, write_tensor

DEFAULT_K = 100
DEFAULT_DIM = 128


@dataclass
class Codebook:
    centroids: np.ndarray  # (K, dim)
    inertia_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2:
            raise ValueError(f"centroids must be 2-D, got {self.centroids.shape}")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids must be finite")

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _sq_dists(x: np.ndarray, c: np.ndarray, block: int = 256) -> np.ndarray:
    # exact (not the |x|^2 - 2xc + |c|^2 expansion) so ties stay ties
    out = np.empty((len(x), len(c)))
    for s in range(0, len(x), block):
        out[s : s + block] = ((x[s : s + block, None, :] - c[None, :, :]) ** 2).sum(axis=-1)
    return out


def _kmeans_pp(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a centroid; take unused indices
            rest = [i for i in range(n) if i not in set(chosen)]
            chosen.append(rest[0])
        else:
            chosen.append(int(rng.choice(n, p=d2 / total)))
        d2 = np.minimum(d2, ((x - x[chosen[-1]]) ** 2).sum(axis=1))
    return x[chosen].copy()


def kmeans_fit(features, K: int = DEFAULT_K, iterations: int = 50, seed: int = 0) -> Codebook:
    """Lloyd's algorithm from k-means++ seeds.

    Empty clusters are re-seeded to the point farthest from its centroid.
    Inertia is recorded once per iteration and must never increase.
    """
    x = np.asarray(features, dtype=np.float64)
    if K <= 0:
        raise ValueError("K must be positive")
    if K > len(x):
        raise ValueError(f"K={K} exceeds number of frames {len(x)}")
    rng = np.random.default_rng(seed)
    c = _kmeans_pp(x, K, rng)
    history: list[float] = []
    for _ in range(iterations):
        d = _sq_dists(x, c)
        assign = d.argmin(axis=1)
        point_d = d[np.arange(len(x)), assign]
        history.append(float(point_d.sum()))
        if len(history) > 1 and history[-1] > history[-2] * (1 + 1e-12) + 1e-12:
            raise AssertionError("k-means inertia increased")
        new = c.copy()
        counts = np.bincount(assign, minlength=K)
        for k in range(K):
            if counts[k]:
                new[k] = x[assign == k].mean(axis=0)
        for k in np.flatnonzero(counts == 0):
            far = int(point_d.argmax())
            new[k] = x[far]
            point_d[far] = 0.0
        if np.array_equal(new, c):
            break
        c = new
    d = _sq_dists(x, c)
    history.append(float(d.min(axis=1).sum()))
    return Codebook(c, history)


def encode(codebook: Codebook, features) -> np.ndarray:
    """Nearest centroid per frame; ties go to the lowest id."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != codebook.dim:
        raise ValueError(f"feature dim {x.shape[1]} does not match codebook dim {codebook.dim}")
    return _sq_dists(x, codebook.centroids).argmin(axis=1)


def decode(codebook: Codebook, ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= codebook.K):
        raise IndexError(f"unit id out of range [0, {codebook.K})")
    return codebook.centroids[ids].copy()


def save_codebook(codebook: Codebook, path) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", codebook.K, codebook.dim))
        write_tensor(fh, codebook.centroids)


def load_codebook(path) -> Codebook:
    with open(path, "rb") as fh:
        K, dim = struct.unpack("<II", fh.read(8))
        c = read_tensor(fh)
    if c.shape != (K, dim):
        raise ValueError(f"{path}: header says {K}x{dim}, tensor is {c.shape}")
    return Codebook(c)
