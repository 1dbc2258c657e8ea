"""Fréchet distance between feature distributions of image sets.

The feature extractor is a frozen, seeded two-layer random projection
network (dim 16). It is rebuilt identically from its constants on every
call, so distances computed anywhere in a benchmark share the same
embedding and method comparisons stay well-defined.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .rng import RngStream

FEATURE_DIM = 16
_HIDDEN = 32
_FEATURE_SEED = 77003917


@dataclass
class FDResult:
    fd: float
    n_real: int
    n_gen: int
    feature_dim: int

    def to_json(self) -> dict:
        return {"fd": self.fd, "n_real": self.n_real, "n_gen": self.n_gen,
                "feature_dim": self.feature_dim}


@lru_cache(maxsize=8)
def _feature_weights(n_pixels: int, dim: int):
    rng = RngStream(_FEATURE_SEED)
    w1 = rng.child("w1").normal((_HIDDEN, n_pixels), scale=1.0 / np.sqrt(n_pixels))
    b1 = rng.child("b1").normal((_HIDDEN,), scale=0.1)
    w2 = rng.child("w2").normal((dim, _HIDDEN), scale=1.0 / np.sqrt(_HIDDEN))
    return w1, b1, w2


def frechet_features(images: np.ndarray, dim: int = FEATURE_DIM) -> np.ndarray:
    """Embed (N, C, H, W) images into the frozen random feature space."""
    flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    w1, b1, w2 = _feature_weights(flat.shape[1], dim)
    return np.tanh(flat @ w1.T + b1) @ w2.T


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, q = np.linalg.eigh(m)
    w = np.clip(w, 0.0, None)
    return (q * np.sqrt(w)) @ q.T


def frechet_from_stats(mu1, cov1, mu2, cov2) -> float:
    """||mu1-mu2||^2 + Tr(C1 + C2 - 2 (C1 C2)^1/2), clamped at zero.

    The cross term uses Tr((C1 C2)^1/2) = Tr((A C1 A)^1/2) with A = C2^1/2,
    keeping every decomposition symmetric; negative eigenvalues from
    round-off are clamped to zero.
    """
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    cov1, cov2 = np.atleast_2d(cov1), np.atleast_2d(cov2)
    a = _sqrt_psd(cov2)
    inner = a @ cov1 @ a
    eigs = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    tr_cross = float(np.sum(np.sqrt(eigs)))
    diff = mu1 - mu2
    fd = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_cross)
    return max(fd, 0.0)


def frechet_distance(real_feats: np.ndarray, gen_feats: np.ndarray) -> FDResult:
    """Fréchet distance between Gaussian fits of two feature sets."""
    real = np.atleast_2d(np.asarray(real_feats, dtype=np.float64))
    gen = np.atleast_2d(np.asarray(gen_feats, dtype=np.float64))
    if real.shape[1] != gen.shape[1]:
        raise ValueError(
            f"feature dims differ: {real.shape[1]} vs {gen.shape[1]}"
        )
    dim = real.shape[1]
    for name, arr in (("real", real), ("generated", gen)):
        if arr.shape[0] < dim + 1:
            raise ValueError(
                f"{name} set needs at least dim+1 = {dim + 1} rows for a "
                f"nondegenerate covariance, got {arr.shape[0]}"
            )
    mu1, mu2 = real.mean(axis=0), gen.mean(axis=0)
    cov1 = np.cov(real, rowvar=False, ddof=1)
    cov2 = np.cov(gen, rowvar=False, ddof=1)
    fd = frechet_from_stats(mu1, cov1, mu2, cov2)
    return FDResult(fd=fd, n_real=real.shape[0], n_gen=gen.shape[0],
                    feature_dim=dim)
