"""Skeleton topology, pose containers, primitive construction and the
root-joint depth solver.

3D poses are plain (N, 3) float arrays in camera coordinates (x right,
y down, z forward). 2D poses live in ray coordinates: the (x, y) of the
unit-depth, undistorted viewing ray.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, DegenerateConfigurationError, DegenerateEdgeError
from .geometry import rotation_between

__all__ = [
    "SkeletonTopology",
    "Pose2D",
    "PrimitiveSet",
    "primitives_from_pose",
    "root_depth",
    "compose_absolute_pose",
    "pose_error",
]

_EDGE_EPS = 1e-12
_ROOT_GRAD_TOL = 1e-10


@dataclass(eq=False)
class SkeletonTopology:
    """Joint count, limb edges with widths (meters) and an optional root joint."""

    joints: int
    edges: np.ndarray  # (M, 2) int
    widths: np.ndarray  # (M,)
    names: list[str] | None = None
    root: int = 0

    def __post_init__(self):
        self.joints = int(self.joints)
        if self.joints < 1:
            raise ValueError("topology needs at least one joint")
        edges = np.asarray(self.edges, dtype=int)
        if edges.ndim != 2 or edges.shape[1] != 2:
            raise ValueError("edges must be an (M, 2) index array")
        if edges.size and (edges.min() < 0 or edges.max() >= self.joints):
            raise ValueError("edge indices must lie in [0, joints)")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise ValueError("edges must join two distinct joints")
        seen = set()
        for i, j in edges:
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"duplicate edge ({i}, {j})")
            seen.add(key)
        widths = np.asarray(self.widths, dtype=float).reshape(-1)
        if widths.shape[0] != edges.shape[0]:
            raise ValueError("need one width per edge")
        if np.any(~np.isfinite(widths)) or np.any(widths <= 0):
            raise ValueError("edge widths must be positive and finite")
        if self.names is not None and len(self.names) != self.joints:
            raise ValueError("need one name per joint")
        if not 0 <= int(self.root) < self.joints:
            raise ValueError("root index out of range")
        self.edges = edges
        self.widths = widths
        self.root = int(self.root)

    @property
    def edge_count(self) -> int:
        return self.edges.shape[0]


@dataclass(eq=False)
class Pose2D:
    """Joint locations in ray coordinates with per-joint confidences in [0, 1]."""

    points: np.ndarray  # (N, 2)
    confidence: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError("points must be (N, 2)")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        if self.confidence is None:
            conf = np.ones(pts.shape[0])
        else:
            conf = np.asarray(self.confidence, dtype=float).reshape(-1)
            if conf.shape[0] != pts.shape[0]:
                raise ValueError("need one confidence per joint")
            if np.any(~np.isfinite(conf)) or np.any(conf < 0) or np.any(conf > 1):
                raise ValueError("confidences must lie in [0, 1]")
        self.points = pts
        self.confidence = conf


@dataclass(eq=False)
class PrimitiveSet:
    """Per-limb Gaussian primitives: location, SPD shape and appearance vector."""

    mu: np.ndarray  # (M, 3)
    sigma: np.ndarray  # (M, 3, 3)
    appearance: np.ndarray  # (M, A)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float).reshape(-1, 3)
        self.sigma = np.asarray(self.sigma, dtype=float).reshape(-1, 3, 3)
        self.appearance = np.atleast_2d(np.asarray(self.appearance, dtype=float))
        m = self.mu.shape[0]
        if self.sigma.shape[0] != m or self.appearance.shape[0] != m:
            raise ValueError("mu, sigma and appearance must agree on the primitive count")

    @property
    def count(self) -> int:
        return self.mu.shape[0]

    @property
    def channels(self) -> int:
        return self.appearance.shape[1]


_E1 = np.array([1.0, 0.0, 0.0])


def primitives_from_pose(pose, topo: SkeletonTopology, appearances) -> PrimitiveSet:
    """One anisotropic Gaussian per limb: centered at the edge midpoint, with
    principal axis along the limb (eigenvalue = limb length) and the two
    transverse eigenvalues equal to the limb width."""
    pose = np.asarray(pose, dtype=float)
    if pose.shape != (topo.joints, 3):
        raise ValueError(f"pose must be ({topo.joints}, 3), got {pose.shape}")
    app = np.asarray(appearances, dtype=float)
    if app.ndim != 2 or app.shape[0] != topo.edge_count:
        raise ValueError("appearances must be (edge_count, channels)")
    m = topo.edge_count
    mu = np.empty((m, 3))
    sigma = np.empty((m, 3, 3))
    for k, (i, j) in enumerate(topo.edges):
        d = pose[j] - pose[i]
        length = float(np.linalg.norm(d))
        if length <= _EDGE_EPS:
            raise DegenerateEdgeError(f"edge {k} (joints {i}, {j}): endpoints coincide")
        mu[k] = 0.5 * (pose[i] + pose[j])
        rot = rotation_between(_E1, d)
        lam = np.diag([length, topo.widths[k], topo.widths[k]])
        sigma[k] = rot @ lam @ rot.T
    return PrimitiveSet(mu, sigma, app.copy())


def _reprojection_grad(z, x1, y1, xo, yo, xr, yr, zr, wgt):
    """Derivative w.r.t. root depth of the weighted mean squared reprojection error."""
    zj = z + zr
    xj = (z * x1 + xr) / zj
    yj = (z * y1 + yr) / zj
    terms = (2.0 / zj) * ((xj - xo) * (x1 - xj) + (yj - yo) * (y1 - yj))
    return float(np.average(terms, weights=wgt))


def reprojection_loss(z, p2d: Pose2D, rel, root: int = 0, weighted: bool = False) -> float:
    """Mean squared distance, in ray coordinates, between the pose reprojected
    at root depth ``z`` and the observed 2D pose (non-root joints)."""
    pts = p2d.points
    rel = np.asarray(rel, dtype=float)
    mask = np.arange(rel.shape[0]) != root
    xr, yr, zr = rel[mask].T
    xo, yo = pts[mask].T
    x1, y1 = pts[root]
    wgt = p2d.confidence[mask] if weighted else None
    zj = z + zr
    xj = (z * x1 + xr) / zj
    yj = (z * y1 + yr) / zj
    d = (xj - xo) ** 2 + (yj - yo) ** 2
    return float(np.average(d, weights=wgt))


def root_depth(p2d: Pose2D, rel, root: int = 0, weighted: bool = False) -> float:
    """Depth of the root joint minimizing the reprojection error of a
    root-relative pose against its observed 2D pose in ray coordinates.

    A per-joint closed form (exact zero of each joint's gradient term) is
    averaged as the initializer, then the full gradient is driven to
    |g| <= 1e-10 by a guarded secant/bisection search over positive depths.
    """
    pts = np.asarray(p2d.points, dtype=float)
    rel = np.asarray(rel, dtype=float)
    if rel.ndim != 2 or rel.shape[1] != 3:
        raise ValueError("relative pose must be (N, 3)")
    if pts.shape[0] != rel.shape[0]:
        raise ValueError("2D pose and relative pose must have the same joint count")
    n = rel.shape[0]
    if not 0 <= root < n:
        raise ValueError("root index out of range")
    mask = np.arange(n) != root
    xr, yr, zr = rel[mask].T
    if np.all(np.abs(rel[mask]) <= 0.0):
        raise DegenerateConfigurationError("relative pose is identically zero")
    xo, yo = pts[mask].T
    x1, y1 = pts[root]
    wgt = p2d.confidence[mask] if weighted else np.ones(n - 1)
    if float(wgt.sum()) <= 0.0:
        raise DegenerateConfigurationError("all confidences are zero")

    # Closed-form initializer: each usable joint contributes the depth at
    # which its own gradient term vanishes; their (weighted) mean seeds the
    # numerical refinement.
    num = xr**2 + yr**2 + ((xo * x1 + yo * y1) * zr - (xo + x1) * xr - (yo + y1) * yr) * zr
    den = (xo - x1) * (xr - x1 * zr) + (yo - y1) * (yr - y1 * zr)
    usable = np.abs(den) > 1e-12
    if not usable.any():
        raise DegenerateConfigurationError("closed-form denominators all vanish")
    z_init = float(np.average(num[usable] / den[usable], weights=wgt[usable]))

    # All joints must stay strictly in front of the pinhole during the search.
    z_floor = max(0.0, float(-zr.min())) if zr.size else 0.0
    lo_limit = z_floor + 1e-9

    def grad(z):
        return _reprojection_grad(z, x1, y1, xo, yo, xr, yr, zr, wgt)

    a = min(max(z_init, lo_limit + 1e-6), 1e6)
    ga = grad(a)
    if ga > 0.0:
        # Minimum lies below the initializer: march geometrically toward the floor.
        b, gb = a, ga
        while ga > 0.0:
            step = a - z_floor
            a_new = z_floor + 0.5 * step
            if a_new <= lo_limit or step < 1e-14:
                if z_floor == 0.0:
                    raise DegenerateConfigurationError(
                        "optimal root depth is not positive (pose behind camera)"
                    )
                raise DegenerateConfigurationError(
                    "no interior optimum: depth driven to the nearest-joint limit"
                )
            b, gb = a, ga
            a = a_new
            ga = grad(a)
    else:
        b, gb = a, ga
        while gb <= 0.0:
            b_new = 2.0 * b + 1.0
            if b_new > 1e9:
                raise DegenerateConfigurationError("reprojection error decreases without bound")
            a, ga = b, gb
            b = b_new
            gb = grad(b)

    if abs(ga) <= _ROOT_GRAD_TOL:
        return a
    if abs(gb) <= _ROOT_GRAD_TOL:
        return b

    # ga < 0 < gb: guarded secant with bisection fallback.
    z, gz = a, ga
    for _ in range(200):
        denom = gb - ga
        z = 0.5 * (a + b)
        if denom != 0.0:
            sec = (a * gb - b * ga) / denom
            if a < sec < b:
                z = sec
        gz = grad(z)
        if abs(gz) <= _ROOT_GRAD_TOL:
            return float(z)
        if gz < 0.0:
            a, ga = z, gz
        else:
            b, gb = z, gz
        if b - a <= 1e-15 * max(1.0, b):
            break
    if abs(gz) <= 1e2 * _ROOT_GRAD_TOL:
        return float(z)
    raise ConvergenceError(
        f"root depth refinement stalled with |gradient| = {abs(gz):.3e}",
        residual=abs(gz),
    )


def compose_absolute_pose(z: float, root_ray, rel, root: int = 0) -> np.ndarray:
    """Absolute camera-frame pose from root depth, root ray coordinates and
    root-relative offsets."""
    if z <= 0:
        raise ValueError("root depth must be positive")
    rel = np.asarray(rel, dtype=float)
    x, y = np.asarray(root_ray, dtype=float).reshape(2)
    root_pos = z * np.array([x, y, 1.0])
    out = rel + root_pos
    out[root] = root_pos
    return out


def pose_error(pred, target, confidence=None) -> float:
    """Confidence-weighted mean of squared per-joint distances."""
    a = np.asarray(pred, dtype=float)
    b = np.asarray(target, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"pose shapes differ: {a.shape} vs {b.shape}")
    d2 = np.sum((a - b) ** 2, axis=-1)
    if confidence is None:
        c = np.ones(d2.shape[0])
    else:
        c = np.asarray(confidence, dtype=float).reshape(-1)
        if c.shape[0] != d2.shape[0]:
            raise ValueError("need one confidence per joint")
    return float(np.mean(c * d2))
