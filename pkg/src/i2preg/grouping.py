"""Super-point grouping and the coarse image patch grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


@dataclass(frozen=True)
class GroupSet:
    centers: np.ndarray        # (M, 3)
    center_indices: np.ndarray  # (M,) indices into the cloud
    assignment: np.ndarray     # (N,) group id per point

    @property
    def m(self) -> int:
        return len(self.center_indices)


@dataclass(frozen=True)
class PatchGrid:
    patch_size_s: int
    rows: int
    cols: int

    @classmethod
    def for_image(cls, height: int, width: int, patch_size_s: int) -> "PatchGrid":
        if height % patch_size_s or width % patch_size_s:
            raise ValueError(f"patch size {patch_size_s} does not divide {height}x{width}")
        return cls(patch_size_s, height // patch_size_s, width // patch_size_s)

    @property
    def num_patches(self) -> int:
        return self.rows * self.cols

    def coords(self) -> np.ndarray:
        """(rows*cols, 2) array of (row, col) in row-major order."""
        rr, cc = np.meshgrid(np.arange(self.rows), np.arange(self.cols), indexing="ij")
        return np.stack([rr.ravel(), cc.ravel()], axis=1)

    def flat(self, row, col):
        return np.asarray(row) * self.cols + np.asarray(col)

    def center_pixels(self) -> np.ndarray:
        """(rows*cols, 2) centre pixels (u, v) of every patch."""
        rc = self.coords()
        s = self.patch_size_s
        return np.stack([(rc[:, 1] + 0.5) * s - 0.5, (rc[:, 0] + 0.5) * s - 0.5], axis=1)


def patch_of_pixel(grid: PatchGrid, pixel):
    """Patch ``(row, col)`` containing pixel ``(u, v)``."""
    u, v = float(pixel[0]), float(pixel[1])
    s = grid.patch_size_s
    if not (0 <= u < grid.cols * s and 0 <= v < grid.rows * s):
        raise ValueError(f"pixel ({u}, {v}) outside the image")
    return int(np.floor(v / s)), int(np.floor(u / s))


def patches_of_pixels(grid: PatchGrid, pixels) -> np.ndarray:
    """Vectorised :func:`patch_of_pixel`; returns (N, 2) (row, col)."""
    px = np.asarray(pixels, dtype=np.float64)
    s = grid.patch_size_s
    if np.any((px[:, 0] < 0) | (px[:, 0] >= grid.cols * s) | (px[:, 1] < 0) | (px[:, 1] >= grid.rows * s)):
        raise ValueError("pixel outside the image")
    return np.stack([np.floor(px[:, 1] / s), np.floor(px[:, 0] / s)], axis=1).astype(np.int64)


def assign_to_centers(points, centers, candidates: int = 4) -> np.ndarray:
    """Nearest-centre id per point; ties go to the lowest centre id.

    A KD-tree proposes the ``candidates`` nearest centres; the winner is then
    picked on explicitly computed squared distances so exact ties are decided
    by id, not by tree traversal order.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    if len(centers) == 0:
        raise ValueError("no centres")
    k = min(candidates, len(centers))
    _, idx = cKDTree(centers).query(points, k=k)
    idx = idx.reshape(len(points), k)
    d = ((points[:, None, :] - centers[idx]) ** 2).sum(-1)
    # among equal distances prefer the lowest id: sort candidates by id first
    by_id = np.argsort(idx, axis=1, kind="stable")
    idx = np.take_along_axis(idx, by_id, axis=1)
    d = np.take_along_axis(d, by_id, axis=1)
    return idx[np.arange(len(points)), np.argmin(d, axis=1)]


def _sq_dist_to(cols, p, out, tmp):
    np.subtract(cols[0], p[0], out=out)
    np.square(out, out=out)
    for a in (1, 2):
        np.subtract(cols[a], p[a], out=tmp)
        np.square(tmp, out=tmp)
        out += tmp
    return out


def farthest_point_sampling(cloud, m: int, seed_index: int = 0) -> GroupSet:
    """Greedy FPS starting at ``seed_index``; ties go to the lowest point index.

    ``cloud`` is an (N, 3) array or anything with a ``points`` attribute.
    """
    points = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    n = len(points)
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= N, got m={m}, N={n}")
    if not 0 <= seed_index < n:
        raise ValueError("seed_index out of range")
    cols = np.ascontiguousarray(points.T)
    d, tmp = np.empty(n), np.empty(n)
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = seed_index
    min_d = _sq_dist_to(cols, points[seed_index], np.empty(n), tmp)
    min_d[seed_index] = -1.0
    for k in range(1, m):
        nxt = int(np.argmax(min_d))
        chosen[k] = nxt
        np.minimum(min_d, _sq_dist_to(cols, points[nxt], d, tmp), out=min_d)
        min_d[nxt] = -1.0
    centers = points[chosen]
    assignment = assign_to_centers(points, centers)
    return GroupSet(centers=centers, center_indices=chosen, assignment=assignment)
