"""Trainable codebook, scores of latents against codes, usage statistics and
the non-variational maintenance heuristics (EMA update, dead-code reset)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    as_tensor,
    div,
    matmul,
    mul,
    reshape,
    scale,
    square,
    sub,
    swapaxes,
    tsum,
)
from .variance import VarianceParam

EMA_EPS = 1e-5
RESET_EVERY = 20
RESET_RATIO = 0.03
RESET_NOISE_VAR = 0.01


@dataclass
class Codebook:
    entries: Tensor
    unit_norm: bool = False

    def __post_init__(self):
        self.entries = as_tensor(self.entries)
        if self.entries.ndim != 2:
            raise ShapeError("codebook entries must be a K x d_b matrix")
        if self.K < 2 or self.d_b < 1:
            raise ShapeError("codebook needs K >= 2 and d_b >= 1")
        if self.unit_norm:
            norms = np.linalg.norm(self.entries.data, axis=1)
            if np.max(np.abs(norms - 1.0)) > 1e-10:
                raise ShapeError("unit_norm codebook rows must have norm 1")

    @property
    def K(self) -> int:
        return self.entries.shape[0]

    @property
    def d_b(self) -> int:
        return self.entries.shape[1]

    @classmethod
    def init(cls, K: int, d_b: int, rng: np.random.Generator, unit_norm: bool = False):
        """Entries i.i.d. Normal(0, 1/d_b); rows projected to the sphere in vMF mode."""
        data = rng.normal(0.0, 1.0 / np.sqrt(d_b), size=(K, d_b))
        if unit_norm:
            data /= np.linalg.norm(data, axis=1, keepdims=True)
        return cls(Tensor(data, requires_grad=True, name="codebook"), unit_norm)

    def renormalize(self) -> None:
        if self.unit_norm:
            d = self.entries.data
            d /= np.linalg.norm(d, axis=1, keepdims=True)


@dataclass
class UsageStats:
    """Usage window counts plus the EMA accumulators."""

    counts: np.ndarray
    ema_cluster_size: np.ndarray
    ema_cluster_sum: np.ndarray
    window_batches: int = 0

    @classmethod
    def zeros(cls, K: int, d_b: int) -> "UsageStats":
        return cls(np.zeros(K, dtype=np.int64), np.zeros(K), np.zeros((K, d_b)))


def gaussian_scores(Z, cb: Codebook, var: VarianceParam) -> Tensor:
    """Unnormalized log-probabilities -(b_k - z_i)^T Sigma^-1 (b_k - z_i) / 2.

    ``Z`` has shape (..., d_z, d_b); the result is (..., d_z, K).
    """
    Z = as_tensor(Z)
    if Z.ndim < 2 or Z.shape[-1] != cb.d_b:
        raise ShapeError(f"latents {Z.shape} do not match code dim {cb.d_b}")
    if not var.is_gaussian:
        raise ShapeError(f"gaussian_scores got variance kind {var.kind}")
    diff = sub(reshape(Z, Z.shape[:-1] + (1, cb.d_b)), cb.entries)
    return scale(tsum(div(square(diff), var.for_scores()), axis=-1), -0.5)


def vmf_scores(Z, cb: Codebook, kappa_phi) -> Tensor:
    """kappa_phi * b_k^T z_i for unit-norm latents and codes."""
    Z = as_tensor(Z)
    if not cb.unit_norm:
        raise ShapeError("vmf_scores needs a unit_norm codebook")
    norms = np.linalg.norm(Z.data, axis=-1)
    if np.max(np.abs(norms - 1.0)) > 1e-8:
        raise ShapeError("vmf_scores needs unit-norm latent rows")
    if isinstance(kappa_phi, VarianceParam):
        kappa_phi = kappa_phi.value()
    kappa_phi = as_tensor(kappa_phi)
    if np.any(kappa_phi.data < 0):
        raise ShapeError("kappa_phi must be >= 0")
    return mul(matmul(Z, swapaxes(cb.entries, 0, 1)), kappa_phi)


def nearest_codes(Z: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Index of the Euclidean-nearest code per latent row; lowest index on ties."""
    Z = np.asarray(Z)
    d2 = np.sum((Z[..., None, :] - entries) ** 2, axis=-1)
    return np.argmin(d2, axis=-1)


def usage_histogram(hard_indices, K: int) -> np.ndarray:
    idx = np.asarray(hard_indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= K):
        raise ShapeError(f"code index out of range [0, {K})")
    return np.bincount(idx, minlength=K).astype(np.int64)


def perplexity(counts) -> float:
    """exp of the Shannon entropy of the empirical code-usage distribution."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if not total > 0:
        raise ShapeError("perplexity of an empty usage histogram")
    p = counts[counts > 0] / total
    return float(np.exp(-np.sum(p * np.log(p))))


def ema_update(cb: Codebook, stats: UsageStats, batch_Z, assignments, gamma: float):
    """One exponential-moving-average codebook step (in place).

    size_k <- g*size_k + (1-g)*n_k,  sum_k <- g*sum_k + (1-g)*sum(z assigned to k),
    b_k <- sum_k / max(size_k, eps).  Codes whose accumulated size is still
    below eps keep their current entry.
    """
    if not 0.0 < gamma < 1.0:
        raise ShapeError("EMA decay must lie in (0, 1)")
    Zf = np.asarray(batch_Z, dtype=np.float64).reshape(-1, cb.d_b)
    idx = np.asarray(assignments, dtype=np.int64).reshape(-1)
    if idx.shape[0] != Zf.shape[0]:
        raise ShapeError("one assignment per latent row required")
    n = usage_histogram(idx, cb.K).astype(np.float64)
    sums = np.zeros((cb.K, cb.d_b))
    np.add.at(sums, idx, Zf)
    stats.ema_cluster_size = gamma * stats.ema_cluster_size + (1.0 - gamma) * n
    stats.ema_cluster_sum = gamma * stats.ema_cluster_sum + (1.0 - gamma) * sums
    live = stats.ema_cluster_size > EMA_EPS
    cb.entries.data[live] = (stats.ema_cluster_sum[live]
                             / np.maximum(stats.ema_cluster_size[live], EMA_EPS)[:, None])
    return cb, stats


def record_usage(stats: UsageStats, hard_indices, K: int) -> None:
    stats.counts = stats.counts + usage_histogram(hard_indices, K)
    stats.window_batches += 1


def codebook_reset(cb: Codebook, stats: UsageStats, rng: np.random.Generator) -> bool:
    """Re-seed the least used code near the most used one if it falls under 3%.

    Looks at ``stats.counts`` (the current usage window) and then clears the
    window.  Returns whether a reset happened.
    """
    counts = stats.counts
    most = int(np.argmax(counts))
    least = int(np.argmin(counts))
    fired = bool(counts[least] < RESET_RATIO * counts[most])
    if fired:
        center = cb.entries.data[most]
        cb.entries.data[least] = center + rng.normal(0.0, np.sqrt(RESET_NOISE_VAR), size=cb.d_b)
        # keep the EMA accumulators consistent with the re-seeded entry
        stats.ema_cluster_sum[least] = cb.entries.data[least] * stats.ema_cluster_size[least]
    stats.counts = np.zeros_like(counts)
    stats.window_batches = 0
    return fired
