"""On-disk formats: PLY clouds, camera/result JSONL, correspondence text, PGM/PPM."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .geom import CameraModel, GeometryError, Pose
from .scenegen import Box, CameraRecord, PointCloud, SceneBundle
from .types import CorrespondenceSet

SCENE_CLOUD = "cloud.ply"
SCENE_CAMERAS = "cameras.jsonl"
SCENE_META = "scene.json"


class DataError(ValueError):
    """Malformed or missing input data; message carries file and line."""


# ---------------------------------------------------------------------------
# point clouds
# ---------------------------------------------------------------------------

def write_ply(path, points) -> None:
    """Binary little-endian PLY with float64 x, y, z (exact round trip)."""
    pts = np.ascontiguousarray(np.asarray(points, dtype="<f8").reshape(-1, 3))
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {len(pts)}\n"
              "property double x\nproperty double y\nproperty double z\nend_header\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(pts.tobytes())


_PLY_TYPES = {"float": "f4", "float32": "f4", "double": "f8", "float64": "f8"}


def read_ply(path) -> np.ndarray:
    """Read x, y, z from an ASCII or binary little-endian PLY of float vertices."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from exc
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise DataError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    fmt, count, props = None, None, []
    for lineno, line in enumerate(header, 1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            if tok[1] != "vertex" or count is not None:
                raise DataError(f"{path}:{lineno}: only a single vertex element is supported")
            count = int(tok[2])
        elif tok[0] == "property":
            if tok[1] not in _PLY_TYPES:
                raise DataError(f"{path}:{lineno}: unsupported property type {tok[1]!r}")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
    names = [p[0] for p in props]
    if count is None or not {"x", "y", "z"} <= set(names):
        raise DataError(f"{path}: vertex element with x, y, z required")
    body = raw[end + len(b"end_header\n"):]
    if fmt == "binary_little_endian":
        dtype = np.dtype([(n, "<" + t) for n, t in props])
        if len(body) != count * dtype.itemsize:
            raise DataError(f"{path}: expected {count} vertices, found {len(body) / dtype.itemsize:g}")
        arr = np.frombuffer(body, dtype=dtype, count=count)
        pts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
    elif fmt == "ascii":
        lines = body.decode("ascii").splitlines()
        if len(lines) < count:
            raise DataError(f"{path}: expected {count} vertices, found {len(lines)}")
        cols = [names.index(k) for k in "xyz"]
        pts = np.empty((count, 3))
        first = len(header) + 2
        for i, line in enumerate(lines[:count]):
            tok = line.split()
            try:
                pts[i] = [float(tok[c]) for c in cols]
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{first + i}: malformed vertex {line!r}") from exc
    else:
        raise DataError(f"{path}: unsupported PLY format {fmt!r}")
    if not np.all(np.isfinite(pts)):
        raise DataError(f"{path}: non-finite coordinates")
    return pts


# ---------------------------------------------------------------------------
# cameras and scenes
# ---------------------------------------------------------------------------

def camera_to_record(rec: CameraRecord) -> dict:
    cam, pose = rec.camera, rec.pose
    return {
        "id": rec.image_id,
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "rotation": [float(v) for v in pose.rotation.ravel()],
        "translation": [float(v) for v in pose.translation],
        "mount_height": rec.height, "pitch_deg": rec.pitch_deg, "yaw_deg": rec.yaw_deg,
    }


def record_to_camera(obj: dict) -> CameraRecord:
    cam = CameraModel(float(obj["fx"]), float(obj["fy"]), float(obj["cx"]), float(obj["cy"]),
                      int(obj["width"]), int(obj["height"]))
    rot = np.asarray(obj["rotation"], dtype=np.float64)
    trans = np.asarray(obj["translation"], dtype=np.float64)
    if rot.size != 9 or trans.size != 3:
        raise ValueError("rotation needs 9 values and translation 3")
    return CameraRecord(str(obj["id"]), cam, Pose(rot.reshape(3, 3), trans),
                        float(obj.get("mount_height", math.nan)), float(obj.get("pitch_deg", math.nan)),
                        float(obj.get("yaw_deg", math.nan)))


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(_dumps(r) + "\n")


def read_jsonl(path, parse=lambda obj: obj) -> list:
    """Parse every non-blank line; errors name the file and line number."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from exc
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(parse(json.loads(line)))
        except (ValueError, KeyError, TypeError, GeometryError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_cameras(path, cameras) -> None:
    write_jsonl(path, (camera_to_record(c) for c in cameras))


def read_cameras(path) -> list:
    return read_jsonl(path, record_to_camera)


def save_scene(directory, scene: SceneBundle, extra_meta: dict | None = None) -> dict:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_ply(d / SCENE_CLOUD, scene.cloud.points)
    write_cameras(d / SCENE_CAMERAS, scene.cameras)
    meta = {"seed": scene.seed, "num_points": len(scene.cloud), "num_cameras": len(scene.cameras),
            "region_lo": list(scene.region.lo), "region_hi": list(scene.region.hi)}
    meta.update(extra_meta or {})
    (d / SCENE_META).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return meta


def load_scene(directory) -> SceneBundle:
    d = Path(directory)
    meta_path = d / SCENE_META
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"{meta_path}: {exc.strerror}") from exc
    except ValueError as exc:
        raise DataError(f"{meta_path}: {exc}") from exc
    try:
        region = Box(tuple(meta["region_lo"]), tuple(meta["region_hi"]))
        seed = int(meta["seed"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{meta_path}: missing or bad field {exc}") from exc
    cameras = read_cameras(d / SCENE_CAMERAS)
    if not cameras:
        raise DataError(f"{d / SCENE_CAMERAS}: no cameras")
    return SceneBundle(PointCloud(read_ply(d / SCENE_CLOUD)), cameras, region, seed)


# ---------------------------------------------------------------------------
# correspondences and results
# ---------------------------------------------------------------------------

def write_correspondences(path, corr: CorrespondenceSet) -> None:
    """One ``point_index u v confidence`` line per pair."""
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(corr)):
            u, v = corr.pixels[i]
            fh.write(f"{int(corr.point_index[i])} {float(u)!r} {float(v)!r} {float(corr.confidence[i])!r}\n")


def read_correspondences(path, cloud_points) -> CorrespondenceSet:
    path = Path(path)
    pts = np.asarray(cloud_points, dtype=np.float64)
    idx, px, conf = [], [], []
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from exc
    for lineno, line in enumerate(lines, 1):
        tok = line.split()
        if not tok:
            continue
        try:
            if len(tok) != 4:
                raise ValueError(f"expected 4 fields, got {len(tok)}")
            i = int(tok[0])
            if not 0 <= i < len(pts):
                raise ValueError(f"point index {i} out of range")
            u, v, c = float(tok[1]), float(tok[2]), float(tok[3])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        idx.append(i)
        px.append((u, v))
        conf.append(c)
    idx = np.asarray(idx, dtype=np.int64)
    return CorrespondenceSet(idx, pts[idx] if len(idx) else np.zeros((0, 3)), px, conf)


def result_to_record(image_id: str, result, extra: dict | None = None) -> dict:
    pose = result.pose
    rec = {
        "image_id": image_id,
        "rotation": None if pose is None else [float(v) for v in pose.rotation.ravel()],
        "translation": None if pose is None else [float(v) for v in pose.translation],
        "rre": _finite_or_none(result.rre),
        "rte": _finite_or_none(result.rte),
        "inliers": [int(i) for i in result.inlier_ids],
        "success": bool(result.success),
    }
    rec.update(extra or {})
    return rec


def _finite_or_none(x):
    x = float(x)
    return x if math.isfinite(x) else None


def record_error(value) -> float:
    """Error field of a result record; ``null`` (failed registration) is infinite."""
    return math.inf if value is None else float(value)


# ---------------------------------------------------------------------------
# rasters
# ---------------------------------------------------------------------------

def write_pgm(path, image) -> None:
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("PGM needs a 2-D uint8 array")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def write_ppm(path, image) -> None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError("PPM needs an (H, W, 3) uint8 array")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pnm(path) -> np.ndarray:
    """Read binary PGM (P5) or PPM (P6) with maxval 255."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in ("P5", "P6"):
        raise DataError(f"{path}: unsupported PNM {magic} maxval {maxval}")
    ch = 3 if magic == "P6" else 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * ch, offset=pos)
    return data.reshape(h, w, 3) if ch == 3 else data.reshape(h, w)
