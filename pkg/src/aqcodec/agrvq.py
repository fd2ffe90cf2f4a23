"""Adaptively grouped residual vector quantizer (acoustic stages).

Each residual stage learns its own pair of complementary projections
instead of slicing coordinates by position: branch a projects onto the
top principal directions of the incoming residuals, branch b onto the
principal directions of whatever branch a's reconstruction leaves
behind.  Both branches carry a 90-entry codebook, so one stage emits a
single combined index in [0, 8100).  Stages chain residually and later
stages never influence earlier indices (prefix property).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .semantic import _check_latents, _sq_dists, kmeans

GROUP_SIZE = 90
STAGE_INDEX_SPAN = GROUP_SIZE * GROUP_SIZE  # 8100 combined indices per stage
MAX_STAGES = 3
DEFAULT_REDUCED_DIM = 8
_ENCODE_CHUNK = 8192  # rows per block so encode memory stays flat


def combine_index(a: int, b: int) -> int:
    """Fuse per-branch indices into one stage index: a * 90 + b."""
    if not (0 <= a < GROUP_SIZE and 0 <= b < GROUP_SIZE):
        raise DataError(f"branch indices must lie in [0, {GROUP_SIZE}), got ({a}, {b})")
    return a * GROUP_SIZE + b


def split_index(combined: int) -> tuple[int, int]:
    """Inverse of combine_index."""
    if not 0 <= combined < STAGE_INDEX_SPAN:
        raise DataError(f"combined index must lie in [0, {STAGE_INDEX_SPAN}), got {combined}")
    return divmod(int(combined), GROUP_SIZE)


@dataclass(frozen=True)
class AgrvqStage:
    """One residual stage: two projections, their lifts, two codebooks.

    proj_*: (D, d) column-orthonormal projection directions.
    lift_*: (d, D) regularized least-squares inverse back to latent space.
    codebook_*: (90, d) centroids in the projected space.
    """

    proj_a: np.ndarray
    lift_a: np.ndarray
    codebook_a: np.ndarray
    proj_b: np.ndarray
    lift_b: np.ndarray
    codebook_b: np.ndarray

    @property
    def latent_dim(self) -> int:
        return self.proj_a.shape[0]

    @property
    def reduced_dim(self) -> int:
        return self.proj_a.shape[1]


@dataclass(frozen=True)
class AgrvqQuantizer:
    """An ordered chain of residual stages over a fixed latent dimension."""

    stages: tuple
    latent_dim: int
    reduced_dim: int

    @property
    def num_stages(self) -> int:
        return len(self.stages)


def _principal_directions(data: np.ndarray, d: int, rng: np.random.Generator) -> np.ndarray:
    """Top-d principal directions of uncentered data, deterministic signs.

    Rank-deficient inputs are padded with random directions drawn from
    the orthogonal complement so the result is always column-orthonormal.
    """
    dim = data.shape[1]
    cov = data.T @ data
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    tol = max(eigvals[0], 0.0) * 1e-10
    rank = int(np.sum(eigvals > tol))
    take = min(d, rank)
    basis = eigvecs[:, :take]
    # canonical sign: make the largest-magnitude component positive
    for j in range(basis.shape[1]):
        pivot = int(np.argmax(np.abs(basis[:, j])))
        if basis[pivot, j] < 0:
            basis[:, j] = -basis[:, j]
    if take < d:
        extra = rng.standard_normal((dim, d - take))
        if take:
            extra -= basis @ (basis.T @ extra)
        q, _ = np.linalg.qr(extra)
        basis = np.concatenate([basis, q[:, :d - take]], axis=1) if take else q[:, :d]
    return np.ascontiguousarray(basis)


def _ridge_lift(projected: np.ndarray, targets: np.ndarray, reg: float = 1e-8) -> np.ndarray:
    """Least-squares map from projected coordinates back to latent space."""
    gram = projected.T @ projected
    scale = np.trace(gram) / gram.shape[0] if gram.shape[0] else 1.0
    scale = scale if scale > 0 else 1.0
    return np.linalg.solve(gram + reg * scale * np.eye(gram.shape[0]),
                           projected.T @ targets)


def _nearest(projected: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    return np.argmin(_sq_dists(projected, codebook), axis=1)


def train_stage(residuals: np.ndarray, reduced_dim: int = DEFAULT_REDUCED_DIM,
                seed=0, kmeans_iters: int = 60) -> AgrvqStage:
    """Fit one stage on (N, D) residuals; needs N >= 90.

    Branch a: principal directions of the residuals themselves.
    Branch b: principal directions of what branch a's quantized
    reconstruction leaves behind.  Lifts are ridge least-squares fits
    from the (unquantized) projected coordinates back to the targets.
    """
    residuals = _check_latents(residuals)
    n, dim = residuals.shape
    if n < GROUP_SIZE:
        raise DataError(f"stage training needs at least {GROUP_SIZE} residual rows, got {n}")
    if not 1 <= reduced_dim <= dim:
        raise DataError(f"reduced_dim must lie in [1, {dim}], got {reduced_dim}")
    rng = np.random.default_rng(seed)

    proj_a = _principal_directions(residuals, reduced_dim, rng)
    coords_a = residuals @ proj_a
    lift_a = _ridge_lift(coords_a, residuals)
    codebook_a, _ = kmeans(coords_a, GROUP_SIZE, rng, max_iters=kmeans_iters)

    recon_a = codebook_a[_nearest(coords_a, codebook_a)] @ lift_a
    leftover = residuals - recon_a

    proj_b = _principal_directions(leftover, reduced_dim, rng)
    coords_b = leftover @ proj_b
    lift_b = _ridge_lift(coords_b, leftover)
    codebook_b, _ = kmeans(coords_b, GROUP_SIZE, rng, max_iters=kmeans_iters)

    return AgrvqStage(proj_a=proj_a, lift_a=lift_a, codebook_a=codebook_a,
                      proj_b=proj_b, lift_b=lift_b, codebook_b=codebook_b)


def train_quantizer(residuals: np.ndarray, num_stages: int,
                    reduced_dim: int = DEFAULT_REDUCED_DIM, seed=0) -> AgrvqQuantizer:
    """Fit a residual chain of stages, greedily and sequentially.

    Stage s is trained on the residual left by stages < s and seeded
    independently of how many stages follow, so the first stages of an
    M-stage and an M'-stage quantizer trained on the same data coincide.
    """
    residuals = _check_latents(residuals)
    if not 0 <= num_stages <= MAX_STAGES:
        raise DataError(f"num_stages must lie in [0, {MAX_STAGES}], got {num_stages}")
    stages = []
    current = residuals.copy()
    for s in range(num_stages):
        stage = train_stage(current, reduced_dim=reduced_dim, seed=[seed, s])
        _, recon = quantize_stage(stage, current)
        current -= recon
        stages.append(stage)
    return AgrvqQuantizer(stages=tuple(stages), latent_dim=residuals.shape[1],
                          reduced_dim=reduced_dim)


def quantize_stage(stage: AgrvqStage, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Greedy two-branch quantization of (N, D) rows.

    Branch a is chosen first; branch b sees the residual left by branch
    a's lifted reconstruction.  Returns (combined indices (N,),
    reconstruction (N, D)).
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if rows.shape[1] != stage.latent_dim:
        raise DataError(f"rows have dim {rows.shape[1]}, stage expects {stage.latent_dim}")
    idx_a = _nearest(rows @ stage.proj_a, stage.codebook_a)
    recon_a = stage.codebook_a[idx_a] @ stage.lift_a
    leftover = rows - recon_a
    idx_b = _nearest(leftover @ stage.proj_b, stage.codebook_b)
    recon = recon_a + stage.codebook_b[idx_b] @ stage.lift_b
    return (idx_a * GROUP_SIZE + idx_b).astype(np.int32), recon


def encode(quantizer: AgrvqQuantizer, latents: np.ndarray,
           use_stages: int | None = None) -> np.ndarray:
    """Chain-quantize latents; returns (N, use_stages) combined indices.

    use_stages defaults to all trained stages.  Encoding with fewer
    stages yields exactly the leading columns of a deeper encode.
    """
    latents = _check_latents(latents)
    if latents.shape[1] != quantizer.latent_dim:
        raise DataError(
            f"latents have dim {latents.shape[1]}, quantizer expects {quantizer.latent_dim}"
        )
    use = quantizer.num_stages if use_stages is None else use_stages
    if not 0 <= use <= quantizer.num_stages:
        raise DataError(
            f"use_stages must lie in [0, {quantizer.num_stages}] for this quantizer, got {use}"
        )
    n = latents.shape[0]
    out = np.empty((n, use), dtype=np.int32)
    for lo in range(0, n, _ENCODE_CHUNK):
        block = latents[lo:lo + _ENCODE_CHUNK].copy()
        for s in range(use):
            idx, recon = quantize_stage(quantizer.stages[s], block)
            out[lo:lo + _ENCODE_CHUNK, s] = idx
            block -= recon
    return out


def decode(quantizer: AgrvqQuantizer, indices: np.ndarray) -> np.ndarray:
    """Sum the lifted codebook entries of each stage; (N, S) -> (N, D)."""
    indices = np.atleast_2d(np.asarray(indices))
    if indices.dtype.kind not in "iu":
        raise DataError("acoustic indices must be integers")
    n, use = indices.shape
    if use > quantizer.num_stages:
        raise DataError(
            f"stream carries {use} acoustic stages but quantizer has {quantizer.num_stages}"
        )
    if indices.size and (indices.min() < 0 or indices.max() >= STAGE_INDEX_SPAN):
        raise DataError(f"combined index out of range [0, {STAGE_INDEX_SPAN})")
    out = np.zeros((n, quantizer.latent_dim))
    for s in range(use):
        stage = quantizer.stages[s]
        idx_a, idx_b = np.divmod(indices[:, s].astype(np.int64), GROUP_SIZE)
        out += stage.codebook_a[idx_a] @ stage.lift_a
        out += stage.codebook_b[idx_b] @ stage.lift_b
    return out


@dataclass(frozen=True)
class StageUtilization:
    """Branch usage histograms and normalized perplexities for one stage."""

    counts_a: np.ndarray
    counts_b: np.ndarray
    perplexity_a: float
    perplexity_b: float
    perplexity_combined: float


@dataclass(frozen=True)
class UtilizationReport:
    stages: tuple
    num_vectors: int

    @property
    def assignment_total(self) -> int:
        """Total branch-a assignments across stages: num_vectors * num_stages."""
        return int(sum(int(st.counts_a.sum()) for st in self.stages))


def _normalized_perplexity(counts: np.ndarray, size: int) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(np.exp(-(p * np.log(p)).sum()) / size)


def utilization_report(quantizer: AgrvqQuantizer, indices: np.ndarray) -> UtilizationReport:
    """Histogram per-branch usage of a batch of (N, S) combined indices.

    Perplexities are normalized to [0, 1]: uniform usage of every entry
    scores ~1.0, a single constant index scores 1/size.
    """
    indices = np.atleast_2d(np.asarray(indices))
    n, use = indices.shape
    if use > quantizer.num_stages:
        raise DataError(
            f"indices carry {use} stages but quantizer has {quantizer.num_stages}"
        )
    if indices.size and (indices.min() < 0 or indices.max() >= STAGE_INDEX_SPAN):
        raise DataError(f"combined index out of range [0, {STAGE_INDEX_SPAN})")
    stages = []
    for s in range(use):
        idx_a, idx_b = np.divmod(indices[:, s].astype(np.int64), GROUP_SIZE)
        counts_a = np.bincount(idx_a, minlength=GROUP_SIZE)
        counts_b = np.bincount(idx_b, minlength=GROUP_SIZE)
        combined = np.bincount(indices[:, s].astype(np.int64), minlength=STAGE_INDEX_SPAN)
        stages.append(StageUtilization(
            counts_a=counts_a,
            counts_b=counts_b,
            perplexity_a=_normalized_perplexity(counts_a, GROUP_SIZE),
            perplexity_b=_normalized_perplexity(counts_b, GROUP_SIZE),
            perplexity_combined=_normalized_perplexity(combined, STAGE_INDEX_SPAN),
        ))
    return UtilizationReport(stages=tuple(stages), num_vectors=n)
