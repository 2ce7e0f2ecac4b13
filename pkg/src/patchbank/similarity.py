"""Soft pairing weights for a mini-batch of embeddings.

Two signals are combined into the weight matrix that drives the training
loss: a Gaussian kernel on pairwise distance, and a contextual similarity
measuring how much two points' nearest-neighbor sets overlap, refined by
averaging over reciprocal neighbors and symmetrizing.

Numerical contract: for a fixed batch the results are reproducible to the
bit. Every reduction that feeds a weight runs in a fixed order (ascending
index), so the matrices can be compared bitwise against a scalar
reference implementation.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import (
    AlphaOutOfRange,
    KOutOfRange,
    NonPositiveSigma,
    ShapeMismatch,
)


@dataclass
class SimilarityConfig:
    sigma: float = 1.0
    k: int = 10
    alpha: float = 0.5

    def validate(self):
        if not self.sigma > 0:
            raise NonPositiveSigma(f"sigma must be > 0, got {self.sigma}")
        if not isinstance(self.k, int) or self.k < 2:
            raise KOutOfRange(f"k must be an integer >= 2, got {self.k}")
        if not 0.0 <= self.alpha <= 1.0:
            raise AlphaOutOfRange(f"alpha must be in [0, 1], got {self.alpha}")

    def to_dict(self) -> dict:
        return {"sigma": self.sigma, "k": self.k, "alpha": self.alpha}


def _batch(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ShapeMismatch(
            f"embedding batch must be 2-D with n >= 2, got shape {z.shape}")
    return z


def pairwise_similarity(z, sigma: float) -> np.ndarray:
    """exp(-squared_distance / sigma) for every pair; unit diagonal."""
    z = _batch(z)
    if not sigma > 0:
        raise NonPositiveSigma(f"sigma must be > 0, got {sigma}")
    return np.exp(-kernels.pairwise_sqdist(z, z) / sigma)


def _member_matrix(d2: np.ndarray, k: int) -> np.ndarray:
    # closed threshold at the k-th smallest distance: self always included,
    # ties expand the set beyond k
    thresh = np.sort(d2, axis=1)[:, k - 1]
    return d2 <= thresh[:, None]


def knn_sets(z, k: int) -> list:
    """Index set of each point's k nearest neighbors (self included).

    Membership uses d_ij <= d_ik where d_ik is the k-th smallest distance
    from i, so ties at the boundary enlarge the set.
    """
    z = _batch(z)
    n = z.shape[0]
    if not isinstance(k, int) or not 1 <= k <= n:
        raise KOutOfRange(f"k must be in [1, {n}], got {k}")
    member = _member_matrix(kernels.pairwise_sqdist(z, z), k)
    return [np.flatnonzero(row) for row in member]


def contextual_similarity(z, k: int) -> np.ndarray:
    """Neighbor-overlap similarity with reciprocal query expansion.

    w_tilde[i, j] = |N(i) & N(j)| / |N(i)| when j is in N(i), else 0,
    over k-neighbor sets. Each row is then replaced by the mean of the
    w_tilde rows of i's reciprocal floor(k/2)-neighbors, and the result
    symmetrized by averaging with its transpose. Entries lie in [0, 1].
    """
    z = _batch(z)
    n = z.shape[0]
    if not isinstance(k, int) or not 2 <= k <= n:
        raise KOutOfRange(f"k must be in [2, {n}], got {k}")

    d2 = kernels.pairwise_sqdist(z, z)
    nk = _member_matrix(d2, k)
    sizes = nk.sum(axis=1)  # |N(i)| >= k
    counts = nk.astype(np.int64) @ nk.astype(np.int64).T  # |N(i) & N(j)|
    w_tilde = np.where(nk, counts / sizes[:, None], 0.0)

    half = _member_matrix(d2, k // 2)
    recip = half & half.T  # i is always a reciprocal neighbor of itself

    w_hat = np.empty((n, n), dtype=np.float64)
    for i in range(n):
        members = np.flatnonzero(recip[i])
        acc = np.zeros(n, dtype=np.float64)
        for l in members:  # ascending index order, fixed for reproducibility
            acc += w_tilde[l]
        w_hat[i] = acc / len(members)
    return (w_hat + w_hat.T) / 2.0


def combine(pairwise: np.ndarray, contextual: np.ndarray,
            alpha: float) -> np.ndarray:
    """Convex combination alpha * pairwise + (1 - alpha) * contextual."""
    pairwise = np.asarray(pairwise, dtype=np.float64)
    contextual = np.asarray(contextual, dtype=np.float64)
    if pairwise.shape != contextual.shape:
        raise ShapeMismatch(
            f"weight shapes differ: {pairwise.shape} vs {contextual.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise AlphaOutOfRange(f"alpha must be in [0, 1], got {alpha}")
    return alpha * pairwise + (1.0 - alpha) * contextual


def combined_similarity(z, cfg: SimilarityConfig) -> np.ndarray:
    """Full pairing-weight matrix for a batch under one config."""
    cfg.validate()
    return combine(pairwise_similarity(z, cfg.sigma),
                   contextual_similarity(z, cfg.k), cfg.alpha)
