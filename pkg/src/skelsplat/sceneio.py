"""Scene file parsing/serialization, the FIMG feature-image container and
PPM previews.

Scene files are JSON with five top-level sections::

    {
      "topology":    {"joints": N, "edges": [[i, j], ...], "widths": [...],
                      "names": [...], "root": 0},
      "appearances": [[... A floats ...] x M],
      "poses":       {"name": [[x, y, z] x N], ...},
      "cameras":     {"name": {"fx", "fy", "cx", "cy", "skew", "k1", "k2",
                               "p1", "p2", "k3", "R": [9, row-major],
                               "t": [3], "width", "height"}, ...},
      "render":      {"alpha", "beta", "background": [... A ...],
                      "channels"}
    }

FIMG is a little-endian binary container: magic "FIMG", version u16,
height u32, width u32, channels u32, then H*W*A float32 samples,
row-major and channel-interleaved. The payload must be exactly
H*W*A*4 bytes.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .camera import CameraModel, Distortion, Extrinsics, Intrinsics
from .renderer import FeatureImage, RenderParams
from .skeleton import SkeletonTopology

__all__ = [
    "SceneError",
    "SceneSyntaxError",
    "SceneSchemaError",
    "SceneInvariantError",
    "FimgError",
    "SceneFile",
    "parse_scene",
    "serialize_scene",
    "load_scene",
    "write_feature_image",
    "read_feature_image",
    "ppm_preview",
    "read_pose2d",
    "sample_scene_path",
    "sample_pose2d_path",
    "atomic_write_bytes",
]

FIMG_MAGIC = b"FIMG"
FIMG_VERSION = 1
_FIMG_HEADER = struct.Struct("<HIII")


class SceneError(ValueError):
    """Base class for scene file problems."""


class SceneSyntaxError(SceneError):
    """The scene file is not well-formed JSON."""


class SceneSchemaError(SceneError):
    """The scene JSON does not match the documented schema."""


class SceneInvariantError(SceneError):
    """The scene violates a value constraint (positivity, orthogonality, ...)."""


class FimgError(ValueError):
    """The FIMG container bytes are malformed."""


@dataclass(eq=False)
class SceneFile:
    topology: SkeletonTopology
    appearances: np.ndarray  # (M, A)
    poses: dict[str, np.ndarray]  # each (N, 3)
    cameras: dict[str, CameraModel]
    params: RenderParams


# --------------------------------------------------------------------------
# scene parsing

def _require(obj, path, typ, what):
    if not isinstance(obj, typ) or isinstance(obj, bool):
        raise SceneSchemaError(f"{path}: expected {what}")
    return obj


def _number(obj, path) -> float:
    if isinstance(obj, bool) or not isinstance(obj, (int, float)):
        raise SceneSchemaError(f"{path}: expected a number")
    v = float(obj)
    if not math.isfinite(v):
        raise SceneSchemaError(f"{path}: number must be finite")
    return v


def _integer(obj, path) -> int:
    if isinstance(obj, bool) or not isinstance(obj, int):
        raise SceneSchemaError(f"{path}: expected an integer")
    return obj


def _vector(obj, path, n) -> list[float]:
    _require(obj, path, list, f"a list of {n} numbers")
    if len(obj) != n:
        raise SceneSchemaError(f"{path}: expected {n} entries, got {len(obj)}")
    return [_number(v, f"{path}[{i}]") for i, v in enumerate(obj)]


def _check_keys(obj, path, required, optional=()):
    for key in required:
        if key not in obj:
            raise SceneSchemaError(f"{path}: missing required key '{key}'")
    for key in obj:
        if key not in required and key not in optional:
            raise SceneSchemaError(f"{path}: unknown key '{key}'")


def _parse_topology(obj) -> SkeletonTopology:
    path = "topology"
    _require(obj, path, dict, "an object")
    _check_keys(obj, path, required=("joints", "edges", "widths"), optional=("names", "root"))
    joints = _integer(obj["joints"], f"{path}.joints")
    if joints < 1:
        raise SceneInvariantError(f"{path}.joints: must be at least 1")
    raw_edges = _require(obj["edges"], f"{path}.edges", list, "a list of [i, j] pairs")
    edges = []
    for m, e in enumerate(raw_edges):
        epath = f"{path}.edges[{m}]"
        _require(e, epath, list, "an [i, j] pair")
        if len(e) != 2:
            raise SceneSchemaError(f"{epath}: expected 2 joint indices")
        i = _integer(e[0], f"{epath}[0]")
        j = _integer(e[1], f"{epath}[1]")
        if not (0 <= i < joints and 0 <= j < joints):
            raise SceneSchemaError(
                f"{epath}: joint index out of range for {joints} joints"
            )
        if i == j:
            raise SceneInvariantError(f"{epath}: edge must join two distinct joints")
        edges.append((i, j))
    seen = set()
    for m, (i, j) in enumerate(edges):
        key = (min(i, j), max(i, j))
        if key in seen:
            raise SceneInvariantError(f"{path}.edges[{m}]: duplicate edge ({i}, {j})")
        seen.add(key)
    raw_widths = _require(obj["widths"], f"{path}.widths", list, "a list of numbers")
    if len(raw_widths) != len(edges):
        raise SceneSchemaError(
            f"{path}.widths: expected {len(edges)} entries (one per edge), "
            f"got {len(raw_widths)}"
        )
    widths = []
    for m, w in enumerate(raw_widths):
        v = _number(w, f"{path}.widths[{m}]")
        if v <= 0:
            raise SceneInvariantError(
                f"{path}.widths[{m}]: edge width must satisfy width > 0, got {v}"
            )
        widths.append(v)
    names = None
    if "names" in obj:
        raw_names = _require(obj["names"], f"{path}.names", list, "a list of strings")
        names = [
            _require(nm, f"{path}.names[{i}]", str, "a string") for i, nm in enumerate(raw_names)
        ]
        if len(names) != joints:
            raise SceneSchemaError(f"{path}.names: expected {joints} entries")
    root = 0
    if "root" in obj:
        root = _integer(obj["root"], f"{path}.root")
        if not 0 <= root < joints:
            raise SceneSchemaError(f"{path}.root: out of range for {joints} joints")
    return SkeletonTopology(
        joints=joints,
        edges=np.array(edges, dtype=int).reshape(-1, 2),
        widths=np.array(widths),
        names=names,
        root=root,
    )


def _parse_camera(obj, path) -> CameraModel:
    _require(obj, path, dict, "an object")
    required = ("fx", "fy", "cx", "cy", "R", "t", "width", "height")
    optional = ("skew", "k1", "k2", "p1", "p2", "k3")
    _check_keys(obj, path, required, optional)
    fx = _number(obj["fx"], f"{path}.fx")
    fy = _number(obj["fy"], f"{path}.fy")
    if fx <= 0 or fy <= 0:
        raise SceneInvariantError(f"{path}: focal lengths must be positive")
    intr = Intrinsics(
        fx=fx,
        fy=fy,
        cx=_number(obj["cx"], f"{path}.cx"),
        cy=_number(obj["cy"], f"{path}.cy"),
        skew=_number(obj.get("skew", 0.0), f"{path}.skew"),
    )
    dist = Distortion(
        k1=_number(obj.get("k1", 0.0), f"{path}.k1"),
        k2=_number(obj.get("k2", 0.0), f"{path}.k2"),
        p1=_number(obj.get("p1", 0.0), f"{path}.p1"),
        p2=_number(obj.get("p2", 0.0), f"{path}.p2"),
        k3=_number(obj.get("k3", 0.0), f"{path}.k3"),
    )
    rot = np.array(_vector(obj["R"], f"{path}.R", 9)).reshape(3, 3)
    t = np.array(_vector(obj["t"], f"{path}.t", 3))
    try:
        extr = Extrinsics(rot, t)
    except ValueError as exc:
        raise SceneInvariantError(f"{path}.R: {exc}") from exc
    width = _integer(obj["width"], f"{path}.width")
    height = _integer(obj["height"], f"{path}.height")
    if width < 1 or height < 1:
        raise SceneInvariantError(f"{path}: image dimensions must be at least 1x1")
    return CameraModel(intrinsics=intr, distortion=dist, extrinsics=extr,
                       width=width, height=height)


def parse_scene(text: str) -> SceneFile:
    """Parse and fully validate a scene file; diagnostics carry the JSON path."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneSyntaxError(
            f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    _require(doc, "scene", dict, "a JSON object")
    _check_keys(doc, "scene", ("topology", "appearances", "poses", "cameras", "render"))

    topo = _parse_topology(doc["topology"])

    render_obj = _require(doc["render"], "render", dict, "an object")
    _check_keys(render_obj, "render", ("alpha", "beta", "background", "channels"))
    channels = _integer(render_obj["channels"], "render.channels")
    if channels < 1:
        raise SceneInvariantError("render.channels: must be at least 1")
    alpha = _number(render_obj["alpha"], "render.alpha")
    beta = _number(render_obj["beta"], "render.beta")
    background = np.array(_vector(render_obj["background"], "render.background", channels))
    if alpha <= 0:
        raise SceneInvariantError("render.alpha: must be positive")
    if beta <= 1:
        raise SceneInvariantError("render.beta: must be greater than 1")
    params = RenderParams(alpha=alpha, beta=beta, background=background, channels=channels)

    raw_apps = _require(doc["appearances"], "appearances", list, "a list of rows")
    if len(raw_apps) != topo.edge_count:
        raise SceneSchemaError(
            f"appearances: expected {topo.edge_count} rows (one per edge), "
            f"got {len(raw_apps)}"
        )
    appearances = np.array(
        [_vector(row, f"appearances[{m}]", channels) for m, row in enumerate(raw_apps)]
    ).reshape(topo.edge_count, channels)

    raw_poses = _require(doc["poses"], "poses", dict, "an object of named poses")
    if not raw_poses:
        raise SceneSchemaError("poses: need at least one named pose")
    poses = {}
    for name, rows in raw_poses.items():
        ppath = f"poses.{name}"
        _require(rows, ppath, list, "a list of [x, y, z] rows")
        if len(rows) != topo.joints:
            raise SceneSchemaError(f"{ppath}: expected {topo.joints} joints, got {len(rows)}")
        poses[name] = np.array(
            [_vector(row, f"{ppath}[{i}]", 3) for i, row in enumerate(rows)]
        ).reshape(topo.joints, 3)

    raw_cams = _require(doc["cameras"], "cameras", dict, "an object of named cameras")
    if not raw_cams:
        raise SceneSchemaError("cameras: need at least one named camera")
    cameras = {
        name: _parse_camera(cam, f"cameras.{name}") for name, cam in raw_cams.items()
    }

    return SceneFile(topology=topo, appearances=appearances, poses=poses,
                     cameras=cameras, params=params)


def serialize_scene(scene: SceneFile) -> str:
    """Scene back to JSON text; numbers keep full round-trip precision."""
    topo = scene.topology
    doc = {
        "topology": {
            "joints": topo.joints,
            "edges": [[int(i), int(j)] for i, j in topo.edges],
            "widths": [float(w) for w in topo.widths],
        },
        "appearances": [[float(v) for v in row] for row in scene.appearances],
        "poses": {
            name: [[float(v) for v in row] for row in pose]
            for name, pose in scene.poses.items()
        },
        "cameras": {},
        "render": {
            "alpha": float(scene.params.alpha),
            "beta": float(scene.params.beta),
            "background": [float(v) for v in scene.params.background],
            "channels": int(scene.params.channels),
        },
    }
    if topo.names is not None:
        doc["topology"]["names"] = list(topo.names)
    doc["topology"]["root"] = int(topo.root)
    for name, cam in scene.cameras.items():
        k, d, e = cam.intrinsics, cam.distortion, cam.extrinsics
        doc["cameras"][name] = {
            "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "skew": k.skew,
            "k1": d.k1, "k2": d.k2, "p1": d.p1, "p2": d.p2, "k3": d.k3,
            "R": [float(v) for v in e.rotation.ravel()],
            "t": [float(v) for v in e.translation],
            "width": cam.width,
            "height": cam.height,
        }
    return json.dumps(doc, indent=2) + "\n"


def load_scene(path) -> SceneFile:
    return parse_scene(Path(path).read_text())


# --------------------------------------------------------------------------
# FIMG container

def write_feature_image(image: FeatureImage, sink) -> None:
    """Serialize to the FIMG container. ``sink`` is a path or binary file
    object; paths are written atomically (temp file + rename)."""
    h, w, a = image.data.shape
    payload = np.ascontiguousarray(image.data, dtype="<f4").tobytes()
    blob = FIMG_MAGIC + _FIMG_HEADER.pack(FIMG_VERSION, h, w, a) + payload
    if hasattr(sink, "write"):
        sink.write(blob)
    else:
        atomic_write_bytes(sink, blob)


def read_feature_image(source) -> FeatureImage:
    """Read an FIMG container; the float32 payload is returned bit-exactly."""
    if hasattr(source, "read"):
        blob = source.read()
    else:
        blob = Path(source).read_bytes()
    header_size = len(FIMG_MAGIC) + _FIMG_HEADER.size
    if len(blob) < header_size or blob[:4] != FIMG_MAGIC:
        raise FimgError("bad magic: not an FIMG container")
    version, h, w, a = _FIMG_HEADER.unpack_from(blob, 4)
    if version != FIMG_VERSION:
        raise FimgError(f"unsupported FIMG version {version} (expected {FIMG_VERSION})")
    expected = h * w * a * 4
    actual = len(blob) - header_size
    if actual != expected:
        raise FimgError(
            f"payload length mismatch: header declares {h}x{w}x{a} "
            f"({expected} bytes), found {actual} bytes"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=header_size).reshape(h, w, a).copy()
    return FeatureImage(data)


# --------------------------------------------------------------------------
# previews and auxiliary formats

def ppm_preview(image: FeatureImage, channel_map=(0, 1, 2),
                value_range=(0.0, 1.0)) -> bytes:
    """Binary 8-bit PPM (P6) of three selected channels, affinely mapped
    from [lo, hi] to [0, 255] with clamping."""
    lo, hi = float(value_range[0]), float(value_range[1])
    if not lo < hi:
        raise ValueError("value range must satisfy lo < hi")
    channel_map = tuple(int(c) for c in channel_map)
    if len(channel_map) != 3:
        raise ValueError("channel_map must select exactly 3 channels")
    for c in channel_map:
        if not 0 <= c < image.channels:
            raise ValueError(f"channel index {c} out of range for {image.channels} channels")
    sel = image.data[..., list(channel_map)]
    scaled = np.clip((sel - lo) / (hi - lo), 0.0, 1.0)
    rgb = np.round(scaled * 255.0).astype(np.uint8)
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    return header + rgb.tobytes()


def read_pose2d(source):
    """Read a 2D pose file: one "x y confidence" line per joint, in ray
    coordinates. Blank lines and '#' comments are skipped.

    Returns (points (N, 2), confidences (N,)).
    """
    if hasattr(source, "read"):
        text = source.read()
    else:
        text = Path(source).read_text()
    pts, conf = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        parts = body.split()
        if len(parts) != 3:
            raise ValueError(f"pose2d line {lineno}: expected 'x y confidence'")
        try:
            x, y, c = (float(p) for p in parts)
        except ValueError as exc:
            raise ValueError(f"pose2d line {lineno}: not a number") from exc
        pts.append((x, y))
        conf.append(c)
    if not pts:
        raise ValueError("pose2d file contains no joints")
    return np.array(pts), np.array(conf)


def atomic_write_bytes(path, blob: bytes) -> None:
    """Write to a temp file in the target directory, then rename into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def sample_scene_path() -> Path:
    """Path of the sample scene shipped with the package."""
    return Path(resources.files("skelsplat").joinpath("data/sample_scene.json"))


def sample_pose2d_path() -> Path:
    """Path of the sample 2D pose shipped with the package."""
    return Path(resources.files("skelsplat").joinpath("data/sample_pose2d.txt"))
