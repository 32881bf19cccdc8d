"""Rigid transforms, pinhole projection and camera-ray geometry.

Conventions used throughout the package:

* ``Pose`` maps world to camera coordinates, ``x_cam = R @ x_world + t``.
* Camera frame is x right, y down, z forward.
* Integer pixel coordinates address pixel centres.  Patch ``(row, col)`` of
  size ``s`` covers pixels ``[row*s, row*s + s)`` and its centre pixel is
  ``((col + 0.5)*s - 0.5, (row + 0.5)*s - 0.5)``.
* Pixels are ``(u, v)`` = (column, row).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Pose:
    """SE(3) transform taking world points into the camera frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise GeometryError("pose contains non-finite values")
        if np.abs(R @ R.T - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise GeometryError("rotation is not in SO(3)")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> np.ndarray:
        """Transform ``(..., 3)`` points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates, ``-R^T t``."""
        return -self.rotation.T @ self.translation


def orthonormalize(R) -> np.ndarray:
    """Closest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def look_pose(center, yaw_deg: float, pitch_deg: float) -> Pose:
    """World-to-camera pose for a camera at ``center`` in a z-up world.

    Yaw is measured counter-clockwise from +x, pitch is positive downward.
    """
    yaw, pitch = np.radians(yaw_deg), np.radians(pitch_deg)
    forward = np.array([np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), -np.sin(pitch)])
    right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
    down = np.cross(forward, right)
    R_wc = np.stack([right, down, forward], axis=1)
    R = orthonormalize(R_wc.T)
    return Pose(R, -R @ np.asarray(center, dtype=np.float64))


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float) -> "CameraModel":
        f = (width / 2.0) / np.tan(np.radians(hfov_deg) / 2.0)
        return cls(f, f, width / 2.0, height / 2.0, width, height)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "CameraModel":
        """Same camera with focal lengths multiplied by ``factor``."""
        return CameraModel(self.fx * factor, self.fy * factor, self.cx, self.cy, self.width, self.height)

    def resized(self, width: int, height: int) -> "CameraModel":
        sx, sy = width / self.width, height / self.height
        return CameraModel(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if n == 0:
            raise GeometryError("ray direction must be non-zero")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d / n)


class ProjectionStatus(enum.Enum):
    OK = "ok"
    BEHIND_CAMERA = "behind-camera"
    OUT_OF_BOUNDS = "out-of-bounds"


@dataclass(frozen=True)
class Projection:
    """Outcome of :func:`project`; ``pixel`` is ``None`` unless status is OK."""

    pixel: np.ndarray | None
    status: ProjectionStatus

    def __bool__(self):
        return self.status is ProjectionStatus.OK


def _project_columns(cam: CameraModel, pose: Pose, cols):
    """Pixel u, v and depth z for world points given as a (3, N) array."""
    R, t = pose.rotation, pose.translation
    x, y, z = (R[k, 0] * cols[0] + R[k, 1] * cols[1] + R[k, 2] * cols[2] + t[k] for k in range(3))
    with np.errstate(divide="ignore", invalid="ignore"):
        x /= z
        x *= cam.fx
        x += cam.cx
        y /= z
        y *= cam.fy
        y += cam.cy
    return x, y, z


def _inside(cam: CameraModel, u, v, z):
    return (z > 0) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)


def project_points(cam: CameraModel, pose: Pose, points):
    """Vectorised projection.

    Returns
    -------
    uv : (N, 2) array
        Pixel coordinates (NaN where depth <= 0).
    depth : (N,) array
        Camera-frame z.
    visible : (N,) bool array
        Depth positive and pixel inside ``[0, width) x [0, height)``.
    """
    cols = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=np.float64)).T)
    u, v, z = _project_columns(cam, pose, cols)
    visible = _inside(cam, u, v, z)
    behind = ~(z > 0)
    u[behind] = np.nan
    v[behind] = np.nan
    return np.stack([u, v], axis=1), z, visible


def visible_mask(cam: CameraModel, pose: Pose, point_columns) -> np.ndarray:
    """``visible`` of :func:`project_points` for points given as a (3, N) array."""
    return _inside(cam, *_project_columns(cam, pose, point_columns))


def project(cam: CameraModel, pose: Pose, point_world) -> Projection:
    uv, z, visible = project_points(cam, pose, np.asarray(point_world, dtype=np.float64).reshape(1, 3))
    if not z[0] > 0:
        return Projection(None, ProjectionStatus.BEHIND_CAMERA)
    if not visible[0]:
        return Projection(None, ProjectionStatus.OUT_OF_BOUNDS)
    return Projection(uv[0], ProjectionStatus.OK)


def in_frustum(cam: CameraModel, pose: Pose, point_world) -> bool:
    return bool(project(cam, pose, point_world))


def unproject(cam: CameraModel, pose: Pose, pixel, depth: float) -> np.ndarray:
    """World point seen at ``pixel`` with camera-frame depth ``depth``."""
    u, v = pixel
    pc = np.array([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth])
    return pose.inverse().apply(pc)


def patch_center_pixel(patch_index, patch_size: int) -> np.ndarray:
    row, col = patch_index
    return np.array([(col + 0.5) * patch_size - 0.5, (row + 0.5) * patch_size - 0.5])


def patch_ray(cam: CameraModel, pose: Pose, patch_index, patch_size_s: int) -> Ray:
    row, col = patch_index
    rows, cols = cam.height // patch_size_s, cam.width // patch_size_s
    if not (0 <= row < rows and 0 <= col < cols):
        raise GeometryError(f"patch {tuple(patch_index)} outside {rows}x{cols} grid")
    origin, dirs = patch_rays(cam, pose, patch_size_s, np.array([[row, col]]))
    return Ray(origin, dirs[0])


def patch_rays(cam: CameraModel, pose: Pose, patch_size_s: int, indices=None):
    """Camera centre and unit world-frame directions through patch centres.

    ``indices`` defaults to every patch in row-major order.
    """
    if indices is None:
        rows, cols = cam.height // patch_size_s, cam.width // patch_size_s
        rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
        indices = np.stack([rr.ravel(), cc.ravel()], axis=1)
    indices = np.asarray(indices)
    u = (indices[:, 1] + 0.5) * patch_size_s - 0.5
    v = (indices[:, 0] + 0.5) * patch_size_s - 0.5
    d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u, dtype=np.float64)], axis=1)
    d_world = d_cam @ pose.rotation  # R^T applied row-wise
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    return pose.center, d_world


def angular_radius(ray: Ray, point) -> float:
    """Angle in radians between the ray and the line from its origin to ``point``."""
    w = np.asarray(point, dtype=np.float64) - ray.origin
    n = np.linalg.norm(w)
    if n == 0:
        raise GeometryError("point coincides with ray origin")
    return float(np.arccos(np.clip(w @ ray.direction / n, -1.0, 1.0)))


def point_to_ray_distance(ray: Ray, point) -> float:
    """Distance from ``point`` to the infinite line carrying ``ray``."""
    w = np.asarray(point, dtype=np.float64) - ray.origin
    return float(np.linalg.norm(w - (w @ ray.direction) * ray.direction))


def angular_radius_matrix(origin, directions, points) -> np.ndarray:
    """``Rad[i, j]`` between ray ``i`` and point ``j`` (radians)."""
    w = np.asarray(points, dtype=np.float64) - origin
    n = np.linalg.norm(w, axis=1)
    if np.any(n == 0):
        raise GeometryError("point coincides with ray origin")
    cos = (directions @ w.T) / n[None, :]
    return np.arccos(np.clip(cos, -1.0, 1.0))


def point_ray_distance_matrix(origin, directions, points) -> np.ndarray:
    """``Dist[i, j]`` from point ``i`` to the line of ray ``j`` (meters)."""
    w = np.asarray(points, dtype=np.float64) - origin
    along = w @ directions.T
    sq = np.einsum("ij,ij->i", w, w)[:, None] - along**2
    return np.sqrt(np.maximum(sq, 0.0))
