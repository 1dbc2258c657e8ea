"""Small-matrix singular value decomposition via one-sided Jacobi rotations.

Plenty accurate for the weight matrices in this package (a few hundred
entries per side at most), and dependency-free: the spectral-shift adapter
needs U, sigma, V with orthonormal columns and a faithful reconstruction.
"""

from __future__ import annotations

import numpy as np

_MAX_SWEEPS = 100
_GRAM_TOL = 1e-12


def svd_small(w: np.ndarray):
    """Thin SVD ``w = U @ diag(sigma) @ V.T``.

    Returns (U, sigma, V) with sigma non-negative and non-increasing and
    U, V carrying orthonormal columns. Requires min(m, n) <= 512.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"svd_small: expected a matrix, got shape {w.shape}")
    if not np.isfinite(w).all():
        raise ValueError("svd_small: non-finite entries")
    m, n = w.shape
    if min(m, n) > 512:
        raise ValueError(f"svd_small: min(m, n) = {min(m, n)} exceeds 512")

    transposed = m < n
    a = (w.T if transposed else w).copy()  # rows >= cols
    cols = a.shape[1]
    v = np.eye(cols)

    # Rotate column pairs until every off-diagonal Gram entry is negligible.
    tol_floor = _GRAM_TOL * max(1.0, float(np.abs(a).max()) ** 2)
    for _ in range(_MAX_SWEEPS):
        rotated = False
        for p in range(cols - 1):
            for q in range(p + 1, cols):
                ap = a[:, p]
                aq = a[:, q]
                gamma = float(ap @ aq)
                if abs(gamma) <= max(tol_floor, _GRAM_TOL):
                    continue
                alpha = float(ap @ ap)
                beta = float(aq @ aq)
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.hypot(1.0, zeta))
                if zeta == 0.0:
                    t = 1.0
                c = 1.0 / np.hypot(1.0, t)
                s = c * t
                new_p = c * ap - s * aq
                new_q = s * ap + c * aq
                a[:, p] = new_p
                a[:, q] = new_q
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
                rotated = True
        if not rotated:
            break

    sigma = np.linalg.norm(a, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    a = a[:, order]
    v = v[:, order]

    u = np.zeros_like(a)
    cutoff = max(sigma[0], 1.0) * 1e-13 if cols else 0.0
    null_cols = []
    for j in range(cols):
        if sigma[j] > cutoff:
            u[:, j] = a[:, j] / sigma[j]
        else:
            sigma[j] = 0.0
            null_cols.append(j)
    if null_cols:
        _complete_orthonormal(u, null_cols)

    if transposed:
        return v, sigma, u
    return u, sigma, v


def _complete_orthonormal(u: np.ndarray, null_cols):
    """Fill zero columns of u with vectors orthonormal to the rest."""
    rows = u.shape[0]
    basis = 0
    for j in null_cols:
        while basis < rows:
            cand = np.zeros(rows)
            cand[basis] = 1.0
            basis += 1
            for _ in range(2):  # twice for numerical orthogonality
                cand -= u @ (u.T @ cand)
            norm = np.linalg.norm(cand)
            if norm > 1e-8:
                u[:, j] = cand / norm
                break
        else:
            raise RuntimeError("svd_small: failed to complete orthonormal basis")
