"""Semantic tokenizer: a seeded k-means codebook over token-rate latents.

One latent row (stacked log-mel, 480-dim by default) maps to one
semantic token per 60 ms frame.  Training is k-means++ initialization
followed by Lloyd iterations; assignment is exhaustive nearest-centroid
with ties broken toward the lowest index.  Everything is deterministic
given the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

DEFAULT_CODEBOOK_SIZE = 256
FULL_SCALE_CODEBOOK_SIZE = 8192  # deployment-parity size; training it needs hours of audio
_DIST_CHUNK = 1 << 22  # cap scratch distance matrices at ~32 MB


@dataclass(frozen=True)
class SemanticCodebook:
    """centroids: (K, D) float64; trained_on: corpus fingerprint string."""

    centroids: np.ndarray
    trained_on: str = ""
    distortion_log: tuple = field(default=(), compare=False)

    @property
    def size(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _check_latents(latents: np.ndarray) -> np.ndarray:
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or latents.shape[0] == 0 or latents.shape[1] == 0:
        raise DataError(f"latents must be a non-empty (N, D) matrix, got shape {latents.shape}")
    if not np.all(np.isfinite(latents)):
        raise DataError("latents contain non-finite values")
    return latents


def _sq_dists(rows: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances (N, K), chunked to bound memory."""
    n, k = rows.shape[0], centroids.shape[0]
    cc = np.einsum("kd,kd->k", centroids, centroids)
    out = np.empty((n, k))
    step = max(1, _DIST_CHUNK // max(k, 1))
    for lo in range(0, n, step):
        block = rows[lo:lo + step]
        xx = np.einsum("nd,nd->n", block, block)
        out[lo:lo + step] = xx[:, None] - 2.0 * (block @ centroids.T) + cc[None, :]
    return out


def _kmeans_pp_init(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = data.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    d2 = np.einsum("nd,nd->n", data - data[chosen[0]], data - data[chosen[0]])
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining points coincide with chosen centroids
            chosen[j] = rng.integers(n)
        else:
            chosen[j] = rng.choice(n, p=d2 / total)
        diff = data - data[chosen[j]]
        d2 = np.minimum(d2, np.einsum("nd,nd->n", diff, diff))
    return data[chosen].copy()


def kmeans(data: np.ndarray, k: int, rng: np.random.Generator,
           max_iters: int = 100) -> tuple[np.ndarray, list]:
    """Lloyd's k-means with k-means++ seeding.

    Empty clusters are re-seeded from the point with the highest current
    distortion.  Returns (centroids (k, D), per-iteration distortion log);
    the log is non-increasing.
    """
    data = _check_latents(data)
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if data.shape[0] < k:
        raise DataError(f"k-means needs at least k={k} samples, got {data.shape[0]}")
    centroids = _kmeans_pp_init(data, k, rng)
    log: list = []
    prev = None
    for _ in range(max_iters):
        d2 = _sq_dists(data, centroids)
        assign = np.argmin(d2, axis=1)
        mind = np.maximum(d2[np.arange(len(data)), assign], 0.0)
        log.append(float(mind.sum()))
        counts = np.bincount(assign, minlength=k)
        reseeded = False
        if np.any(counts == 0):
            reseeded = True
            spare = mind.copy()
            for empty in np.flatnonzero(counts == 0):
                far = int(np.argmax(spare))
                centroids[empty] = data[far]
                spare[far] = 0.0
        if not reseeded and prev is not None and np.array_equal(assign, prev):
            break
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, data)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        prev = assign
    return centroids, log


def train_kmeans(latents: np.ndarray, k: int = DEFAULT_CODEBOOK_SIZE, seed: int = 0,
                 max_iters: int = 100, trained_on: str = "") -> SemanticCodebook:
    """Fit a K-entry semantic codebook on (N, D) latents; N >= K required."""
    rng = np.random.default_rng(seed)
    centroids, log = kmeans(latents, k, rng, max_iters=max_iters)
    centroids.setflags(write=False)
    return SemanticCodebook(centroids=centroids, trained_on=trained_on,
                            distortion_log=tuple(log))


def assign(codebook: SemanticCodebook, latents: np.ndarray) -> np.ndarray:
    """Nearest-centroid token indices for (N, D) latents (ties -> lowest index)."""
    latents = _check_latents(latents)
    if latents.shape[1] != codebook.dim:
        raise DataError(
            f"latent dim {latents.shape[1]} does not match codebook dim {codebook.dim}"
        )
    d2 = _sq_dists(latents, codebook.centroids)
    return np.argmin(d2, axis=1).astype(np.int32)


def dequantize(codebook: SemanticCodebook, indices: np.ndarray) -> np.ndarray:
    """Look up centroid rows for token indices; bounds-checked."""
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= codebook.size):
        raise DataError(
            f"semantic index out of range [0, {codebook.size}): "
            f"[{indices.min()}, {indices.max()}]"
        )
    return codebook.centroids[indices.astype(np.int64)]
