"""Small shared linear-algebra helpers used across the toolkit."""

from __future__ import annotations

import numpy as np


def numerical_rank(mat: np.ndarray, rtol: float = 1e-8) -> int:
    """Rank by counting singular values above ``rtol * sigma_max``."""
    if mat.size == 0:
        return 0
    sv = np.linalg.svd(mat, compute_uv=False)
    if sv[0] == 0.0:
        return 0
    return int(np.sum(sv > rtol * sv[0]))


def rank_with_margin(mat: np.ndarray, rtol: float = 1e-8) -> tuple[int, float]:
    """Numerical rank plus the margin sigma_r / sigma_1 of the last kept value."""
    sv = np.linalg.svd(mat, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0, 0.0
    r = int(np.sum(sv > rtol * sv[0]))
    margin = float(sv[r - 1] / sv[0]) if r > 0 else 0.0
    return r, margin


def minimality_rank(mat: np.ndarray) -> int:
    """Rank with the generation-time threshold max_dim * sigma_max * 1e-10."""
    sv = np.linalg.svd(mat, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    tol = max(mat.shape) * sv[0] * 1e-10
    return int(np.sum(sv > tol))


def fast_svd(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD via the small-side Gram eigendecomposition when the aspect
    ratio is extreme; falls back to LAPACK otherwise.  Singular values below
    roughly sqrt(eps) * sigma_max lose relative accuracy, which is acceptable
    for shrinkage operations."""
    rows, cols = mat.shape
    if rows <= cols // 2:
        G = mat @ mat.T
        w, U = np.linalg.eigh(G)
        w = np.ascontiguousarray(w[::-1]).clip(min=0.0)
        U = np.ascontiguousarray(U[:, ::-1])
        s = np.sqrt(w)
        tol = max(s[0], 0.0) * 1e-14
        inv = np.where(s > tol, 1.0 / np.maximum(s, tol), 0.0)
        Vt = inv[:, None] * (U.T @ mat)
        return U, s, Vt
    if cols <= rows // 2:
        U, s, Vt = fast_svd(mat.T)
        return Vt.T, s, U.T
    return np.linalg.svd(mat, full_matrices=False)


def svt(mat: np.ndarray, tau: float) -> np.ndarray:
    """Singular-value soft thresholding: prox of ``tau * ||.||_*``."""
    u, sv, vt = np.linalg.svd(mat, full_matrices=False)
    shrunk = np.maximum(sv - tau, 0.0)
    keep = shrunk > 0.0
    if not np.any(keep):
        return np.zeros_like(mat)
    return (u[:, keep] * shrunk[keep]) @ vt[keep]


def nuclear_norm(mat: np.ndarray) -> float:
    return float(np.sum(np.linalg.svd(mat, compute_uv=False)))


def spectral_radius(mat: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(mat))))
