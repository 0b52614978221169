"""Low-level vector and matrix primitives shared by the camera, skeleton and renderer."""

from __future__ import annotations

import numpy as np

EPS_VECTOR = 1e-12

__all__ = [
    "EPS_VECTOR",
    "rotation_between",
    "mahalanobis_sq",
    "spd_cholesky",
    "spd_inverse",
    "is_rotation",
]


def _smallest_axis_orthonormal(u: np.ndarray) -> np.ndarray:
    # Deterministic unit vector orthogonal to u: Gram-Schmidt of the canonical
    # axis least aligned with u.
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(u)))] = 1.0
    a = axis - (axis @ u) * u
    return a / np.linalg.norm(a)


def rotation_between(x, y) -> np.ndarray:
    """Proper rotation mapping the direction of ``x`` onto the direction of ``y``.

    The result acts as the identity on the orthogonal complement of
    span(x, y). For antiparallel inputs the rotation plane is underdetermined;
    a 180-degree rotation about a deterministically chosen axis orthogonal to
    ``x`` is returned.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    nx = float(np.linalg.norm(x))
    ny = float(np.linalg.norm(y))
    if nx <= EPS_VECTOR or ny <= EPS_VECTOR:
        raise ValueError("rotation_between: zero-length input vector")
    u = x / nx
    w = y / ny
    cos_t = float(u @ w)
    if cos_t <= -1.0 + EPS_VECTOR:
        axis = _smallest_axis_orthonormal(u)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    rej = w - cos_t * u
    nrej = float(np.linalg.norm(rej))
    if nrej <= EPS_VECTOR:
        return np.eye(3)
    v = rej / nrej
    # Guard the radicand: rounding can push cos_t marginally past 1.
    sin_t = np.sqrt(max(0.0, 1.0 - cos_t * cos_t))
    r = np.eye(3)
    r += (cos_t - 1.0) * (np.outer(u, u) + np.outer(v, v))
    r += sin_t * (np.outer(v, u) - np.outer(u, v))
    return r


def spd_cholesky(a) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite 3x3 matrix.

    Failure to factorize is the canonical "not SPD" signal.
    """
    a = np.asarray(a, dtype=float)
    if a.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    if float(np.max(np.abs(a - a.T))) > 1e-12:
        raise ValueError("matrix is not symmetric (tolerance 1e-12)")
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise ValueError("matrix is not positive definite") from exc


def spd_inverse(a) -> np.ndarray:
    """Inverse of an SPD matrix through its Cholesky factor."""
    l = spd_cholesky(a)
    linv = np.linalg.solve(l, np.eye(3))
    return linv.T @ linv


def mahalanobis_sq(u, v, a) -> float:
    """Squared Mahalanobis distance (u - v)^T a^{-1} (u - v) for SPD ``a``."""
    d = np.asarray(u, dtype=float) - np.asarray(v, dtype=float)
    l = spd_cholesky(a)
    z = np.linalg.solve(l, d)
    return float(z @ z)


def is_rotation(r, tol: float = 1e-10) -> bool:
    """True when ``r`` is orthogonal with determinant +1 within ``tol``."""
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        return False
    if np.max(np.abs(r.T @ r - np.eye(3))) > tol:
        return False
    return abs(float(np.linalg.det(r)) - 1.0) <= tol
