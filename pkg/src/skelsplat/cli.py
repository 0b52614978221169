"""Command-line interface.

Subcommands: render a pose into an FIMG feature image, render an orbit of
virtual cameras, solve for the root-joint depth of a 2D pose, certify the
gradients against finite differences, fit a pose to a target image, and
compare the closed-form ray integral against adaptive quadrature.

Exit codes: 0 success, 1 usage, 2 unreadable/invalid input, 3 numeric or
verification failure.
"""

from __future__ import annotations

import argparse
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .camera import CameraModel, Intrinsics, orbit_cameras, transform_pose
from .errors import (
    DegenerateConfigurationError,
    DegenerateEdgeError,
    NumericError,
)
from .fit import FitConfig, fit_pose
from .grad import gradient_check, quad_oracle, random_integral_case
from .renderer import density_integral, render
from .sceneio import (
    FimgError,
    SceneError,
    SceneFile,
    atomic_write_bytes,
    load_scene,
    ppm_preview,
    read_feature_image,
    read_pose2d,
    write_feature_image,
)
from .skeleton import Pose2D, primitives_from_pose, root_depth

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_NUMERIC = 3

GRADCHECK_TOL = 1e-4
ORACLE_TOL = 1e-6


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _pick(table: dict, name: str | None, what: str) -> str:
    if name is None:
        return next(iter(table))
    if name not in table:
        known = ", ".join(sorted(table))
        raise SceneError(f"{what} '{name}' not found (scene defines: {known})")
    return name


def _pose_in_camera(scene: SceneFile, pose_name: str, camera_name: str):
    camera = scene.cameras[camera_name]
    return transform_pose(scene.poses[pose_name], camera.extrinsics), camera


def _render_pose(scene: SceneFile, pose, camera: CameraModel):
    prims = primitives_from_pose(pose, scene.topology, scene.appearances)
    return render(prims, camera, scene.params)


def _scaled_camera(camera: CameraModel, size: int) -> CameraModel:
    sx = size / camera.width
    sy = size / camera.height
    k = camera.intrinsics
    return CameraModel(
        intrinsics=Intrinsics(fx=k.fx * sx, fy=k.fy * sy, cx=k.cx * sx,
                              cy=k.cy * sy, skew=k.skew * sx),
        distortion=camera.distortion,
        extrinsics=camera.extrinsics,
        width=size,
        height=size,
    )


def _cmd_render(args) -> int:
    scene = load_scene(args.scene)
    pose_name = _pick(scene.poses, args.pose, "pose")
    cam_name = _pick(scene.cameras, args.camera, "camera")
    pose, camera = _pose_in_camera(scene, pose_name, cam_name)
    image = _render_pose(scene, pose, camera)
    write_feature_image(image, args.output)
    print(f"wrote {args.output} ({image.height}x{image.width}x{image.channels})")
    if args.preview:
        lo, hi = args.preview_range
        blob = ppm_preview(image, tuple(args.preview_channels), (lo, hi))
        atomic_write_bytes(args.preview, blob)
        print(f"wrote {args.preview}")
    return EXIT_OK


def _cmd_orbit(args) -> int:
    scene = load_scene(args.scene)
    pose_name = _pick(scene.poses, args.pose, "pose")
    cam_name = _pick(scene.cameras, args.camera, "camera")
    pose = scene.poses[pose_name]
    center = pose.mean(axis=0)
    cameras = orbit_cameras(
        center=center,
        radius=args.radius,
        elevation=math.radians(args.elevation),
        count=args.frames,
        template=scene.cameras[cam_name],
    )
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)

    def render_frame(idx_cam):
        idx, cam = idx_cam
        image = _render_pose(scene, transform_pose(pose, cam.extrinsics), cam)
        path = out_dir / f"frame_{idx:03d}.fimg"
        write_feature_image(image, path)
        return path

    tasks = list(enumerate(cameras))
    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            paths = list(pool.map(render_frame, tasks))
    else:
        paths = [render_frame(t) for t in tasks]
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def _cmd_depth_solve(args) -> int:
    scene = load_scene(args.scene)
    pose_name = _pick(scene.poses, args.pose, "pose")
    points, conf = read_pose2d(args.pose2d)
    topo = scene.topology
    if points.shape[0] != topo.joints:
        raise SceneError(
            f"pose2d has {points.shape[0]} joints but the scene topology has {topo.joints}"
        )
    pose = scene.poses[pose_name]
    rel = pose - pose[topo.root]
    z = root_depth(Pose2D(points, conf), rel, root=topo.root, weighted=args.weighted)
    print(f"{z:.12g}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    scene = load_scene(args.scene)
    pose_name = _pick(scene.poses, args.pose, "pose")
    cam_name = _pick(scene.cameras, args.camera, "camera")
    pose, camera = _pose_in_camera(scene, pose_name, cam_name)
    camera = _scaled_camera(camera, args.size)
    rng = np.random.default_rng(args.seed)
    adjoint = rng.normal(size=(camera.height, camera.width, scene.params.channels))
    worst = gradient_check(pose, scene.topology, scene.appearances, camera,
                           scene.params, adjoint)
    print(f"max relative gradient error: {worst:.3e}")
    if worst > GRADCHECK_TOL:
        print(f"FAIL: exceeds tolerance {GRADCHECK_TOL:.0e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _cmd_fit(args) -> int:
    scene = load_scene(args.scene)
    init_name = _pick(scene.poses, args.init, "pose")
    cam_name = _pick(scene.cameras, args.camera, "camera")
    target = read_feature_image(args.target)
    init_pose, camera = _pose_in_camera(scene, init_name, cam_name)
    truth = None
    if args.truth is not None:
        truth_name = _pick(scene.poses, args.truth, "pose")
        truth, _ = _pose_in_camera(scene, truth_name, cam_name)
    cfg = FitConfig(
        max_iters=args.iters,
        step_size=args.step,
        appearance_reg=args.reg,
        convergence_tol=args.tol,
        optimize_appearance=args.optimize_appearance,
    )

    on_iteration = None
    if args.preview_dir is not None:
        preview_dir = Path(args.preview_dir)
        preview_dir.mkdir(parents=True, exist_ok=True)

        def on_iteration(it, _pose, image):
            if it % args.preview_every == 0:
                blob = ppm_preview(image, (0, 1, 2) if image.channels >= 3 else (0, 0, 0),
                                   (-1.0, 1.0))
                atomic_write_bytes(preview_dir / f"iter_{it:04d}.ppm", blob)

    report = fit_pose(target, init_pose, scene.topology, scene.appearances,
                      camera, scene.params, cfg, truth=truth,
                      on_iteration=on_iteration)

    if report.stalled:
        status = "stalled"
    elif report.iterations >= cfg.max_iters:
        status = "max_iters"
    else:
        status = "converged"
    lines = [
        f"status: {status}",
        f"iterations: {report.iterations}",
        f"final_loss: {report.final_loss!r}",
    ]
    if report.pose_error is not None:
        lines.append(f"pose_error: {report.pose_error!r}")
    lines.append("loss_trace:")
    lines.extend(f"  {i} {loss!r}" for i, loss in enumerate(report.loss_trace))
    lines.append("pose:")
    lines.extend(f"  {x!r} {y!r} {z!r}" for x, y, z in report.pose)
    atomic_write_bytes(args.output, ("\n".join(lines) + "\n").encode())
    print(f"wrote {args.output} ({status}, final loss {report.final_loss:.6e})")
    return EXIT_OK


def _cmd_oracle_compare(args) -> int:
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(args.cases):
        r, mu, sigma, alpha = random_integral_case(rng)
        closed = density_integral(r, mu, sigma, alpha)
        reference = quad_oracle(r, mu, sigma, alpha)
        err = abs(closed - reference) / max(abs(closed), abs(reference), 1e-30)
        worst = max(worst, err)
    print(f"max closed-form vs quadrature relative error over {args.cases} cases: {worst:.3e}")
    if worst > ORACLE_TOL:
        print(f"FAIL: exceeds tolerance {ORACLE_TOL:.0e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="skelsplat", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render a scene pose into an FIMG image")
    p.add_argument("scene")
    p.add_argument("--pose", help="pose name (default: first in the scene)")
    p.add_argument("--camera", help="camera name (default: first in the scene)")
    p.add_argument("-o", "--output", required=True, help="output .fimg path")
    p.add_argument("--preview", help="optional PPM preview path")
    p.add_argument("--preview-channels", nargs=3, type=int, default=(0, 1, 2),
                   metavar=("R", "G", "B"))
    p.add_argument("--preview-range", nargs=2, type=float, default=(-1.0, 1.0),
                   metavar=("LO", "HI"))
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("orbit", help="render virtual cameras on a spherical orbit")
    p.add_argument("scene")
    p.add_argument("--pose", help="pose name (default: first)")
    p.add_argument("--camera", help="template camera for intrinsics (default: first)")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--radius", type=float, required=True, help="orbit radius in meters")
    p.add_argument("--elevation", type=float, default=0.0, help="elevation in degrees")
    p.add_argument("--threads", type=int, default=1, help="max concurrent frames")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=_cmd_orbit)

    p = sub.add_parser("depth-solve", help="solve for the root-joint depth of a 2D pose")
    p.add_argument("scene")
    p.add_argument("--pose2d", required=True,
                   help="file with one 'x y confidence' line per joint, ray coordinates")
    p.add_argument("--pose", help="pose supplying the root-relative offsets (default: first)")
    p.add_argument("--weighted", action="store_true",
                   help="weight the reprojection error by the confidences")
    p.set_defaults(func=_cmd_depth_solve)

    p = sub.add_parser("gradcheck",
                       help="certify analytic gradients against finite differences")
    p.add_argument("scene")
    p.add_argument("--pose", help="pose name (default: first)")
    p.add_argument("--camera", help="camera name (default: first)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=16,
                   help="check at this square resolution (default 16)")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("fit", help="fit a pose to a target feature image")
    p.add_argument("scene")
    p.add_argument("--target", required=True, help="target .fimg image")
    p.add_argument("--init", help="initial pose name (default: first)")
    p.add_argument("--camera", help="camera name (default: first)")
    p.add_argument("--truth", help="ground-truth pose name for the error report")
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--step", type=float, default=20.0)
    p.add_argument("--tol", type=float, default=1e-12)
    p.add_argument("--reg", type=float, default=1e-3)
    p.add_argument("--optimize-appearance", action="store_true")
    p.add_argument("-o", "--output", default="fit_report.txt")
    p.add_argument("--preview-dir", help="write per-iteration PPM previews here")
    p.add_argument("--preview-every", type=int, default=10)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("oracle-compare",
                       help="compare the closed-form ray integral against quadrature")
    p.add_argument("--cases", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_oracle_compare)

    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # -h exits 0; usage errors exit 1
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (SceneError, FimgError, OSError, DegenerateEdgeError,
            DegenerateConfigurationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
