"""Shared numerical linear algebra: ranks, nullspaces, subspace angles.

All rank decisions in the package go through ``numerical_rank`` so that the
zero threshold (relative to the largest singular value) is one constant.
"""

from __future__ import annotations

import numpy as np

# Singular values below RANK_RTOL * sigma_max count as zero, package-wide.
RANK_RTOL = 1e-8

# Rank decisions on *measured* quantities (oracle-estimated normals carry
# ~1e-7..1e-6 error) need a coarser cut, safely between that noise floor and
# the O(0.1) singular values of genuinely independent subspaces.
MEASURED_RTOL = 1e-4


def numerical_rank(a: np.ndarray, rtol: float = RANK_RTOL) -> int:
    """Rank of `a` by SVD, with singular values < rtol*sigma_max treated as 0."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0:
        return 0
    s = np.linalg.svd(a, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def nullspace(a: np.ndarray, rtol: float = RANK_RTOL) -> np.ndarray:
    """Orthonormal basis (columns) of the kernel of `a`.

    Shape (n, n - rank) for `a` of shape (m, n); the zero-rank edge case
    returns the full identity-sized basis.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    m, n = a.shape
    if a.size == 0 or not np.any(a):
        return np.eye(n)
    u, s, vh = np.linalg.svd(a, full_matrices=True)
    rank = int(np.sum(s > rtol * s[0])) if s.size else 0
    return vh[rank:].T.copy()


def orth(a: np.ndarray, rtol: float = RANK_RTOL) -> np.ndarray:
    """Orthonormal basis (columns) of the column space of `a`."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0 or not np.any(a):
        return np.zeros((a.shape[0], 0))
    u, s, _ = np.linalg.svd(a, full_matrices=False)
    rank = int(np.sum(s > rtol * s[0])) if s.size else 0
    return u[:, :rank].copy()


def smallest_eigvec(q: np.ndarray) -> tuple[float, np.ndarray]:
    """Smallest eigenpair of a symmetric PSD matrix.

    Returns (lambda_min, unit eigenvector); the symmetric eigensolver makes
    the result deterministic up to sign, which we fix by the first nonzero
    component being positive.
    """
    q = np.asarray(q, dtype=float)
    w, v = np.linalg.eigh(0.5 * (q + q.T))
    vec = v[:, 0]
    nz = np.flatnonzero(np.abs(vec) > 1e-12)
    if nz.size and vec[nz[0]] < 0:
        vec = -vec
    return float(w[0]), vec


def smallest_nonzero_eigval(q: np.ndarray, rtol: float = RANK_RTOL) -> float:
    """Smallest eigenvalue of symmetric PSD `q` above the numerical-zero cut."""
    q = np.asarray(q, dtype=float)
    w = np.linalg.eigvalsh(0.5 * (q + q.T))
    w = np.clip(w, 0.0, None)
    cut = rtol * w[-1] if w.size else 0.0
    nonzero = w[w > cut]
    if nonzero.size == 0:
        raise ValueError("matrix is numerically zero; no nonzero eigenvalue")
    return float(nonzero[0])


def principal_angles(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Principal angles (radians, ascending) between the column spans of a, b."""
    qa = orth(a)
    qb = orth(b)
    if qa.shape[1] == 0 or qb.shape[1] == 0:
        return np.zeros(0)
    s = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return np.arccos(np.clip(s, -1.0, 1.0))[::-1]


def complement_basis(vectors: np.ndarray, dim: int) -> np.ndarray:
    """Orthonormal basis of the orthogonal complement of the given row vectors."""
    v = np.atleast_2d(np.asarray(vectors, dtype=float))
    if v.shape[1] != dim:
        raise ValueError(f"vectors have dim {v.shape[1]}, expected {dim}")
    return nullspace(v)
