"""Raster renderings: depth-coloured projected cloud and correctness-coloured matches."""

from __future__ import annotations

import numpy as np

from .geom import CameraModel, Pose, project_points
from .types import CorrespondenceSet

GREEN = np.array([40, 200, 60], dtype=np.uint8)
RED = np.array([220, 40, 40], dtype=np.uint8)


def depth_colors(depth, near: float, far: float) -> np.ndarray:
    """Near points warm, far points cool; a fixed piecewise-linear ramp."""
    t = np.clip((np.asarray(depth, dtype=np.float64) - near) / max(far - near, 1e-9), 0.0, 1.0)
    stops = np.array([[255, 60, 30], [255, 200, 40], [60, 200, 120], [40, 90, 220]], dtype=np.float64)
    pos = t * (len(stops) - 1)
    k = np.minimum(pos.astype(int), len(stops) - 2)
    f = (pos - k)[:, None]
    return np.rint(stops[k] * (1 - f) + stops[k + 1] * f).astype(np.uint8)


def depth_image(cam: CameraModel, pose: Pose, points, max_depth: float | None = None):
    """Z-buffered projection of ``points``; returns ``(rgb, depth)``.

    Every in-frustum point lands in pixel ``(floor(v), floor(u))``; the
    nearest point owns a pixel.  Empty pixels are black with depth ``inf``.
    """
    uv, z, vis = project_points(cam, pose, points)
    rgb = np.zeros((cam.height, cam.width, 3), dtype=np.uint8)
    depth = np.full((cam.height, cam.width), np.inf)
    if not vis.any():
        return rgb, depth
    u = np.floor(uv[vis, 0]).astype(np.int64)
    v = np.floor(uv[vis, 1]).astype(np.int64)
    zv = z[vis]
    flat = v * cam.width + u
    order = np.lexsort((zv, flat))
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat[order][1:] != flat[order][:-1]
    win = order[first]
    far = float(np.percentile(zv, 95)) if max_depth is None else max_depth
    depth.ravel()[flat[win]] = zv[win]
    rgb.reshape(-1, 3)[flat[win]] = depth_colors(zv[win], float(zv.min()), far)
    return rgb, depth


def reprojection_errors(cam: CameraModel, pose: Pose, corr: CorrespondenceSet) -> np.ndarray:
    uv, _, _ = project_points(cam, pose, corr.points)
    err = np.linalg.norm(uv - corr.pixels, axis=1)
    return np.where(np.isfinite(err), err, np.inf)


def classify(cam: CameraModel, pose: Pose, corr: CorrespondenceSet, threshold: float) -> np.ndarray:
    """True (green class) where the reprojection error under ``pose`` is below ``threshold``."""
    return reprojection_errors(cam, pose, corr) < threshold


def _draw_line(img, p0, p1, color):
    h, w = img.shape[:2]
    n = int(np.ceil(max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1])))) + 1
    t = np.linspace(0.0, 1.0, n)
    u = np.rint(p0[0] + t * (p1[0] - p0[0])).astype(np.int64)
    v = np.rint(p0[1] + t * (p1[1] - p0[1])).astype(np.int64)
    ok = (u >= 0) & (u < w) & (v >= 0) & (v < h)
    img[v[ok], u[ok]] = color


def correspondence_image(cam: CameraModel, gt_pose: Pose, corr: CorrespondenceSet, threshold: float,
                         background=None):
    """Segments from each predicted pixel to the true projection of its point.

    Returns ``(rgb, correct)``.  Pairs with error below ``threshold`` are
    drawn green, the rest red; the background (e.g. a depth render) is dimmed.
    """
    if background is None:
        img = np.zeros((cam.height, cam.width, 3), dtype=np.uint8)
    else:
        img = (np.asarray(background, dtype=np.uint16) // 3).astype(np.uint8)
    uv, _, _ = project_points(cam, gt_pose, corr.points)
    correct = classify(cam, gt_pose, corr, threshold)
    # red first so green stays visible where they overlap
    for i in np.concatenate([np.flatnonzero(~correct), np.flatnonzero(correct)]):
        color = GREEN if correct[i] else RED
        p0 = corr.pixels[i]
        p1 = uv[i] if np.all(np.isfinite(uv[i])) else p0
        _draw_line(img, p0, p1, color)
        _draw_line(img, p0 - (1, 0), p0 + (1, 0), color)
        _draw_line(img, p0 - (0, 1), p0 + (0, 1), color)
    return img, correct
