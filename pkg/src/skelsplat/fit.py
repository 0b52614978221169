"""Inverse graphics: recover a pose (and optionally appearance) from a
target feature image by first-order descent through the renderer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraModel
from .errors import DegenerateEdgeError
from .grad import render_backward
from .renderer import FeatureImage, RenderParams, render
from .skeleton import SkeletonTopology, pose_error, primitives_from_pose

__all__ = ["FitConfig", "FitReport", "l1_image_loss", "appearance_penalty", "fit_pose"]

_MIN_STEP = 1e-12


@dataclass
class FitConfig:
    max_iters: int = 500
    step_size: float = 20.0
    appearance_reg: float = 1e-3
    convergence_tol: float = 1e-12
    optimize_appearance: bool = False

    def __post_init__(self):
        if int(self.max_iters) < 1:
            raise ValueError("max_iters must be at least 1")
        if not (math.isfinite(self.step_size) and self.step_size > 0):
            raise ValueError("step_size must be positive")
        if not (math.isfinite(self.appearance_reg) and self.appearance_reg >= 0):
            raise ValueError("appearance_reg must be nonnegative")
        if not (math.isfinite(self.convergence_tol) and self.convergence_tol > 0):
            raise ValueError("convergence_tol must be positive")
        self.max_iters = int(self.max_iters)


@dataclass(eq=False)
class FitReport:
    pose: np.ndarray
    appearances: np.ndarray
    loss_trace: list[float]
    final_loss: float
    pose_error: float | None = None
    stalled: bool = False

    @property
    def iterations(self) -> int:
        return len(self.loss_trace) - 1


def l1_image_loss(image: FeatureImage, target: FeatureImage) -> float:
    """Mean absolute per-pixel, per-channel difference between two images."""
    a = image.data
    b = target.data
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(b - a)))


def appearance_penalty(appearances) -> float:
    """Squared L2 norm of the appearance vectors, summed over all entries."""
    a = np.asarray(appearances, dtype=float)
    return float(np.sum(a * a))


def fit_pose(target: FeatureImage, init_pose, topo: SkeletonTopology, appearances,
             camera: CameraModel, params: RenderParams, cfg: FitConfig,
             truth=None, on_iteration=None) -> FitReport:
    """Gradient descent with backtracking halving on the image loss.

    The objective is the L1 image loss, plus ``appearance_reg`` times the
    appearance penalty when appearance optimization is enabled. Steps are
    accepted only when the loss does not increase, so the reported trace is
    non-increasing; if backtracking drives the step below 1e-12 the fit
    stops and is flagged as stalled.
    """
    if target.data.shape != (camera.height, camera.width, params.channels):
        raise ValueError(
            f"target shape {target.data.shape} does not match camera/params "
            f"({camera.height}, {camera.width}, {params.channels})"
        )
    pose = np.asarray(init_pose, dtype=float).copy()
    app = np.asarray(appearances, dtype=float).copy()

    def objective(p, a):
        img = render(primitives_from_pose(p, topo, a), camera, params)
        loss = l1_image_loss(img, target)
        if cfg.optimize_appearance:
            loss += cfg.appearance_reg * appearance_penalty(a)
        return loss, img

    loss, image = objective(pose, app)
    trace = [loss]
    step = cfg.step_size
    stalled = False
    seed_scale = 1.0 / target.data.size

    for it in range(cfg.max_iters):
        # Subgradient of the L1 loss, with sign(0) = 0.
        adjoint = np.sign(image.data - target.data) * seed_scale
        grads = render_backward(pose, topo, app, camera, params, adjoint)
        g_pose = grads.d_pose
        g_app = None
        if cfg.optimize_appearance:
            g_app = grads.d_appearance + 2.0 * cfg.appearance_reg * app

        accepted = False
        while step >= _MIN_STEP:
            cand_pose = pose - step * g_pose
            cand_app = app - step * g_app if g_app is not None else app
            try:
                cand_loss, cand_image = objective(cand_pose, cand_app)
            except DegenerateEdgeError:
                cand_loss = math.inf
            if cand_loss <= loss:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            stalled = True
            break

        improvement = loss - cand_loss
        pose, app, loss, image = cand_pose, cand_app, cand_loss, cand_image
        trace.append(loss)
        if on_iteration is not None:
            on_iteration(it, pose, image)
        step *= 2.0
        if improvement < cfg.convergence_tol:
            break

    err = None
    if truth is not None:
        err = pose_error(pose, np.asarray(truth, dtype=float))
    return FitReport(
        pose=pose,
        appearances=app,
        loss_trace=trace,
        final_loss=trace[-1],
        pose_error=err,
        stalled=stalled,
    )
