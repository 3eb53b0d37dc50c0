"""Fine-grained diagonal Gaussian embeddings and the expected-distance metric."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class FineGrainedGaussian:
    """K diagonal Gaussians, stored as K x D means and K x D variances."""

    mu: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        var = np.asarray(self.var, dtype=np.float64)
        if mu.ndim != 2 or mu.shape[0] < 1 or mu.shape[1] < 1:
            raise ValueError(f"mu must be K x D with K, D >= 1, got shape {mu.shape}")
        if var.shape != mu.shape:
            raise ValueError(f"var shape {var.shape} does not match mu shape {mu.shape}")
        # zero is tolerated for degenerate fixtures; trained heads are strictly positive
        if np.any(var < 0):
            raise ValueError("variances must be non-negative")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "var", var)

    @property
    def n_components(self) -> int:
        return self.mu.shape[0]

    @property
    def dim(self) -> int:
        return self.mu.shape[1]

    def component(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        return self.mu[k], self.var[k]


@dataclass(frozen=True)
class GalleryEntry:
    id: Hashable
    gaussian: FineGrainedGaussian


def expected_sq_distance(g1: tuple[np.ndarray, np.ndarray], g2: tuple[np.ndarray, np.ndarray]) -> float:
    """E||z1 - z2||^2 for independent z1 ~ N(mu1, diag var1), z2 ~ N(mu2, diag var2)."""
    mu1, var1 = (np.asarray(x, dtype=np.float64) for x in g1)
    mu2, var2 = (np.asarray(x, dtype=np.float64) for x in g2)
    if mu1.shape != mu2.shape or var1.shape != mu1.shape or var2.shape != mu2.shape:
        raise ValueError(f"dimension mismatch: {mu1.shape} vs {mu2.shape}")
    diff = mu1 - mu2
    # var sums are added first so swapping the arguments is exact in floating point
    return float(diff @ diff + (var1.sum() + var2.sum()))


def mc_expected_sq_distance(g1, g2, n_samples: int, seed: int) -> tuple[float, float]:
    """Monte-Carlo estimate and standard error of E||z1 - z2||^2."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    mu1, var1 = (np.asarray(x, dtype=np.float64) for x in g1)
    mu2, var2 = (np.asarray(x, dtype=np.float64) for x in g2)
    if mu1.shape != mu2.shape:
        raise ValueError(f"dimension mismatch: {mu1.shape} vs {mu2.shape}")
    rng = np.random.default_rng(seed)
    # z1 - z2 ~ N(mu1 - mu2, var1 + var2) for independent draws
    diff = (mu1 - mu2).ravel() + np.sqrt(var1 + var2).ravel() * rng.standard_normal((n_samples, mu1.size))
    d = np.einsum("ij,ij->i", diff, diff)
    return float(d.mean()), float(d.std(ddof=1) / np.sqrt(n_samples))


def holistic_distance(q: FineGrainedGaussian, c: FineGrainedGaussian) -> float:
    """||mu_q - mu_c||_F^2 + sum(var_q) + sum(var_c)."""
    if q.mu.shape != c.mu.shape:
        raise ValueError(f"shape mismatch: {q.mu.shape} vs {c.mu.shape}")
    diff = q.mu - c.mu
    return float(np.sum(diff * diff) + (q.var.sum() + c.var.sum()))


def holistic_distance_t(mu_q, var_q, mu_c, var_c) -> Tensor:
    """Differentiable single-pair version of :func:`holistic_distance`."""
    return ad.add(ad.add(ad.sqnorm(ad.sub(mu_q, mu_c)), ad.sum_(var_q)), ad.sum_(var_c))


def pairwise_holistic_distance(mu_q, var_q, mu_c, var_c) -> Tensor:
    """All-pairs distance matrix between N queries and M candidates.

    Inputs are tensors of shape (N, K, D) and (M, K, D); the result is (N, M).
    The squared mean term is expanded as |a|^2 + |b|^2 - 2<a, b> so the whole
    matrix is a single matmul.
    """
    mu_q, var_q, mu_c, var_c = (ad.as_tensor(x) for x in (mu_q, var_q, mu_c, var_c))
    n, m = mu_q.shape[0], mu_c.shape[0]
    if mu_q.shape[1:] != mu_c.shape[1:]:
        raise ValueError(f"shape mismatch: {mu_q.shape} vs {mu_c.shape}")
    fq = ad.reshape(mu_q, (n, -1))
    fc = ad.reshape(mu_c, (m, -1))
    sq_q = ad.reshape(ad.sqnorm(fq, axis=1), (n, 1))
    sq_c = ad.reshape(ad.sqnorm(fc, axis=1), (1, m))
    cross = ad.matmul(fq, ad.transpose(fc))
    mean_term = ad.sub(ad.add(sq_q, sq_c), ad.scale(cross, 2.0))
    tot_q = ad.reshape(ad.sum_(ad.reshape(var_q, (n, -1)), axis=1), (n, 1))
    tot_c = ad.reshape(ad.sum_(ad.reshape(var_c, (m, -1)), axis=1), (1, m))
    return ad.add(ad.add(mean_term, tot_q), tot_c)


def distance_matrix(mu_q: np.ndarray, var_q: np.ndarray, mu_c: np.ndarray, var_c: np.ndarray) -> np.ndarray:
    """Plain-numpy pairwise distances, computed from explicit differences."""
    diff = mu_q[:, None] - mu_c[None]
    mean_term = np.einsum("nmkd,nmkd->nm", diff, diff)
    return mean_term + var_q.sum(axis=(1, 2))[:, None] + var_c.sum(axis=(1, 2))[None, :]


def rank_gallery(q: FineGrainedGaussian, gallery: Sequence[GalleryEntry]) -> list:
    """Gallery ids sorted by ascending holistic distance; ties keep insertion order."""
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    ids = [e.id for e in gallery]
    if len(set(ids)) != len(ids):
        raise ValueError("gallery ids must be unique")
    for e in gallery:
        if e.gaussian.mu.shape != q.mu.shape:
            raise ValueError(f"shape mismatch: {q.mu.shape} vs {e.gaussian.mu.shape}")
    # sum(var_q) is the same for every candidate; leaving it out keeps the order
    # exact under float rounding rather than merely equal in exact arithmetic
    d = np.array([np.sum((q.mu - e.gaussian.mu) ** 2) + e.gaussian.var.sum() for e in gallery])
    return [ids[i] for i in np.argsort(d, kind="stable")]
