"""Pinhole camera with radial-tangential lens distortion: ray generation,
distortion and its fixed-point inverse, extrinsic pose transfer, orbit paths.

Pixel convention: pixel (i, j) = (row, column) maps to the homogeneous image
point (j, i, 1) with zero-based indices and no half-pixel offset; pass
``half_pixel=True`` to ray_grid for +0.5 centering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError
from .geometry import is_rotation

MAX_UNDISTORT_ITERS = 20
UNDISTORT_STEP_TOL = 1e-12
UNDISTORT_RESIDUAL_TOL = 1e-9

__all__ = [
    "Intrinsics",
    "Distortion",
    "Extrinsics",
    "CameraModel",
    "distort",
    "undistort",
    "ray_grid",
    "project_points",
    "transform_pose",
    "orbit_cameras",
]


@dataclass(frozen=True)
class Intrinsics:
    """Focal lengths, principal point and skew, all in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy, self.skew)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array(
            [
                [self.fx, self.skew, self.cx],
                [0.0, self.fy, self.cy],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True)
class Distortion:
    """Radial (k1, k2, k3) and tangential (p1, p2) lens coefficients."""

    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    k3: float = 0.0

    def __post_init__(self):
        vals = (self.k1, self.k2, self.p1, self.p2, self.k3)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("distortion coefficients must be finite")

    def is_zero(self) -> bool:
        return self.k1 == self.k2 == self.p1 == self.p2 == self.k3 == 0.0


@dataclass(eq=False)
class Extrinsics:
    """Rigid transform p_cam = R p + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not is_rotation(r, tol=1e-10):
            raise ValueError("rotation must be orthogonal with determinant +1")
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        self.rotation = r
        self.translation = t

    @classmethod
    def identity(cls) -> "Extrinsics":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "Extrinsics":
        return Extrinsics(self.rotation.T, -self.rotation.T @ self.translation)


@dataclass(eq=False)
class CameraModel:
    intrinsics: Intrinsics
    distortion: Distortion
    extrinsics: Extrinsics
    width: int
    height: int

    def __post_init__(self):
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError("image dimensions must be at least 1x1")
        self.width = int(self.width)
        self.height = int(self.height)

    def position(self) -> np.ndarray:
        """Camera center in the reference frame the extrinsics map from."""
        e = self.extrinsics
        return -e.rotation.T @ e.translation


def distort(xn, distortion: Distortion) -> np.ndarray:
    """Apply radial-tangential distortion to normalized image points (..., 2)."""
    xn = np.asarray(xn, dtype=float)
    x = xn[..., 0]
    y = xn[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + r2 * (distortion.k1 + r2 * (distortion.k2 + r2 * distortion.k3))
    xd = x * radial + 2.0 * distortion.p1 * x * y + distortion.p2 * (r2 + 2.0 * x * x)
    yd = y * radial + distortion.p1 * (r2 + 2.0 * y * y) + 2.0 * distortion.p2 * x * y
    return np.stack([xd, yd], axis=-1)


def _undistort_fixed_point(xd: np.ndarray, distortion: Distortion):
    """Fixed-point iteration xu <- (xd - tangential(xu)) / radial(xu).

    Returns the estimate together with the per-point forward residual
    max |distort(xu) - xd| so callers can attach context to failures.
    """
    xu = xd.copy()
    for _ in range(MAX_UNDISTORT_ITERS):
        x = xu[..., 0]
        y = xu[..., 1]
        r2 = x * x + y * y
        radial = 1.0 + r2 * (distortion.k1 + r2 * (distortion.k2 + r2 * distortion.k3))
        tx = 2.0 * distortion.p1 * x * y + distortion.p2 * (r2 + 2.0 * x * x)
        ty = distortion.p1 * (r2 + 2.0 * y * y) + 2.0 * distortion.p2 * x * y
        nxt = np.stack([(xd[..., 0] - tx) / radial, (xd[..., 1] - ty) / radial], axis=-1)
        delta = float(np.max(np.abs(nxt - xu))) if xu.size else 0.0
        xu = nxt
        if delta < UNDISTORT_STEP_TOL:
            break
    residual = np.max(np.abs(distort(xu, distortion) - xd), axis=-1)
    return xu, residual


def undistort(xd, distortion: Distortion) -> np.ndarray:
    """Invert :func:`distort`; the result xu satisfies distort(xu) = xd within 1e-9."""
    xd = np.asarray(xd, dtype=float)
    xu, residual = _undistort_fixed_point(xd.reshape(-1, 2), distortion)
    worst = float(residual.max()) if residual.size else 0.0
    if worst > UNDISTORT_RESIDUAL_TOL:
        raise ConvergenceError(
            f"undistortion did not converge after {MAX_UNDISTORT_ITERS} iterations: "
            f"residual {worst:.3e}",
            residual=worst,
        )
    return xu.reshape(xd.shape)


def ray_grid(camera: CameraModel, *, half_pixel: bool = False) -> np.ndarray:
    """Unit viewing ray through every pixel, shape (H, W, 3).

    Ray (i, j) is the undistorted, normalized back-projection of the image
    point (j + off, i + off, 1) with off = 0.5 when ``half_pixel`` is set.
    """
    k = camera.intrinsics
    h, w = camera.height, camera.width
    off = 0.5 if half_pixel else 0.0
    jj, ii = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    yn = (ii + off - k.cy) / k.fy
    xn = (jj + off - k.cx - k.skew * yn) / k.fx
    pts = np.stack([xn, yn], axis=-1).reshape(-1, 2)
    xu, residual = _undistort_fixed_point(pts, camera.distortion)
    worst_idx = int(residual.argmax())
    if residual[worst_idx] > UNDISTORT_RESIDUAL_TOL:
        pi, pj = divmod(worst_idx, w)
        raise ConvergenceError(
            f"ray undistortion did not converge at pixel (i={pi}, j={pj}): "
            f"residual {residual[worst_idx]:.3e}",
            residual=float(residual[worst_idx]),
        )
    dirs = np.concatenate([xu, np.ones((xu.shape[0], 1))], axis=1)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs.reshape(h, w, 3)


def project_points(camera: CameraModel, points) -> np.ndarray:
    """Project camera-frame points (..., 3) to pixel coordinates (u, v)."""
    p = np.asarray(points, dtype=float)
    z = p[..., 2]
    xn = np.stack([p[..., 0] / z, p[..., 1] / z], axis=-1)
    xd = distort(xn, camera.distortion)
    k = camera.intrinsics
    u = k.fx * xd[..., 0] + k.skew * xd[..., 1] + k.cx
    v = k.fy * xd[..., 1] + k.cy
    return np.stack([u, v], axis=-1)


def transform_pose(pose, extrinsics: Extrinsics) -> np.ndarray:
    """Apply the rigid transform to every joint of an (N, 3) pose."""
    p = np.asarray(pose, dtype=float)
    return p @ extrinsics.rotation.T + extrinsics.translation


def orbit_cameras(
    center,
    radius: float,
    elevation: float,
    count: int,
    template: CameraModel,
    up=(0.0, -1.0, 0.0),
) -> list[CameraModel]:
    """Cameras evenly spaced in azimuth on a sphere about ``center``.

    All cameras look at ``center`` with the given up direction (default -y,
    matching the y-down camera convention); intrinsics, distortion and image
    size are copied from ``template``. ``elevation`` is in radians, positive
    above the horizontal plane.
    """
    center = np.asarray(center, dtype=float).reshape(3)
    if radius <= 0:
        raise ValueError("orbit radius must be positive")
    if count < 1:
        raise ValueError("need at least one orbit camera")
    upv = np.asarray(up, dtype=float).reshape(3)
    nup = np.linalg.norm(upv)
    if nup <= 1e-12:
        raise ValueError("up vector must be nonzero")
    upv = upv / nup
    # Horizontal basis: azimuth 0 along h1, 90 degrees along h2.
    h_seed = np.zeros(3)
    h_seed[int(np.argmin(np.abs(upv)))] = 1.0
    h1 = h_seed - (h_seed @ upv) * upv
    h1 /= np.linalg.norm(h1)
    h2 = np.cross(upv, h1)

    cameras = []
    ce, se = math.cos(elevation), math.sin(elevation)
    for m in range(count):
        az = 2.0 * math.pi * m / count
        pos = center + radius * (ce * math.cos(az) * h1 + ce * math.sin(az) * h2 + se * upv)
        forward = center - pos
        forward /= np.linalg.norm(forward)
        right = np.cross(-upv, forward)
        nr = np.linalg.norm(right)
        if nr <= 1e-9:
            raise ValueError("degenerate look-at: view axis parallel to the up vector")
        right /= nr
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward], axis=0)
        cameras.append(
            CameraModel(
                intrinsics=template.intrinsics,
                distortion=template.distortion,
                extrinsics=Extrinsics(rot, -rot @ pos),
                width=template.width,
                height=template.height,
            )
        )
    return cameras
