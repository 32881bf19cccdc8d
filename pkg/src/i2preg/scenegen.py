"""Procedural intersection scenes, capture-pose grids and oracle features.

The generator stands in for a simulator capture: it emits surface-sampled
geometry (road surface, kerbs, box buildings, poles, trees) inside a
100 m x 100 m x 50 m region and a grid of surveillance-style cameras, then
applies the same downsampling, voxel partitioning and image association
steps a real capture would go through.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import CameraModel, Pose, look_pose, project_points, visible_mask
from .grouping import GroupSet, PatchGrid, patches_of_pixels
from .types import CorrespondenceSet, FeatureSet

# 1920x1080 with a 90 deg horizontal FOV
PROTOCOL_CAMERA = CameraModel(960.0, 960.0, 960.0, 540.0, 1920, 1080)
REGION_SIZE = (100.0, 100.0, 50.0)
DOWNSAMPLE_RESOLUTION = 0.2
VOXEL_SIZE = 50.0
VOXEL_STRIDE = 25.0
ASSOCIATION_FRACTION = 0.30


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with half-open membership ``lo <= p < hi``."""

    lo: tuple
    hi: tuple

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p >= np.asarray(self.lo)) & (p < np.asarray(self.hi)), axis=1)

    def expanded(self, margin: float) -> "Box":
        return Box(tuple(np.asarray(self.lo) - margin), tuple(np.asarray(self.hi) + margin))

    @property
    def size(self):
        return tuple(np.asarray(self.hi) - np.asarray(self.lo))


DEFAULT_REGION = Box((-50.0, -50.0, 0.0), (50.0, 50.0, 50.0))


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3 or len(p) < 1:
            raise ValueError("point cloud must be a non-empty (N, 3) array")
        if not np.all(np.isfinite(p)):
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", p)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class CameraRecord:
    image_id: str
    camera: CameraModel
    pose: Pose
    height: float = float("nan")
    pitch_deg: float = float("nan")
    yaw_deg: float = float("nan")


@dataclass(frozen=True)
class PoseSamplingSpec:
    """Capture grid: every xy position x every height x pitches x yaws."""

    grid_positions: tuple
    heights: tuple
    pitches: tuple
    yaw_count: int = 8
    fov_deg: float = 90.0
    image_size: tuple = (1920, 1080)  # (width, height)

    def __post_init__(self):
        if self.yaw_count < 1:
            raise ValueError("yaw_count must be >= 1")
        if not all(0 < p < 90 for p in self.pitches):
            raise ValueError("pitches must lie in (0, 90) degrees")
        if not all(h > 0 for h in self.heights):
            raise ValueError("heights must be positive")

    @property
    def num_positions(self) -> int:
        return len(self.grid_positions) * len(self.heights)

    @property
    def num_images(self) -> int:
        return self.num_positions * len(self.pitches) * self.yaw_count

    def camera_model(self) -> CameraModel:
        w, h = self.image_size
        if (w, h) == (1920, 1080) and self.fov_deg == 90.0:
            return PROTOCOL_CAMERA
        return CameraModel.from_fov(w, h, self.fov_deg)


def xy_grid(n: int, spacing: float) -> tuple:
    """``n`` positions on a near-square grid centred on the origin."""
    if n < 1:
        raise ValueError("need at least one position")
    rows = int(np.floor(np.sqrt(n)))
    while n % rows:
        rows -= 1
    cols = n // rows
    xs = (np.arange(cols) - (cols - 1) / 2) * spacing
    ys = (np.arange(rows) - (rows - 1) / 2) * spacing
    return tuple((float(x), float(y)) for y in ys for x in xs)


def testing_split(positions: int = 18, hard: bool = False, spacing: float = 6.0) -> PoseSamplingSpec:
    heights = (6.5, 7.5)
    if positions % len(heights):
        raise ValueError("positions must be a multiple of the number of heights")
    return PoseSamplingSpec(xy_grid(positions // len(heights), spacing), heights,
                            (20.0, 25.0) if hard else (15.0, 30.0))


def training_split(positions: int = 48, spacing: float = 5.0) -> PoseSamplingSpec:
    heights = (6.0, 7.0, 8.0)
    if positions % len(heights):
        raise ValueError("positions must be a multiple of the number of heights")
    return PoseSamplingSpec(xy_grid(positions // len(heights), spacing), heights, (15.0, 30.0))


def sample_poses(spec: PoseSamplingSpec, prefix: str = "img") -> list:
    cam = spec.camera_model()
    records = []
    for (x, y) in spec.grid_positions:
        for h in spec.heights:
            for pitch in spec.pitches:
                for k in range(spec.yaw_count):
                    yaw = k * (360.0 / spec.yaw_count)
                    pose = look_pose((x, y, h), yaw, pitch)
                    records.append(CameraRecord(f"{prefix}{len(records):04d}", cam, pose, h, pitch, yaw))
    return records


@dataclass(frozen=True)
class SceneSpec:
    """Scene-complexity knobs for :func:`generate_scene`."""

    poses: PoseSamplingSpec = field(default_factory=testing_split)
    region: Box = DEFAULT_REGION
    density: float = 25.0           # raw samples per m^2 before downsampling
    road_half_width: float = 10.0
    kerb_height: float = 0.15
    buildings_per_quadrant: tuple = (2, 4)
    building_height: tuple = (6.0, 40.0)
    n_poles: int = 16
    n_trees: int = 12
    resolution: float = DOWNSAMPLE_RESOLUTION


@dataclass
class SceneBundle:
    cloud: PointCloud
    cameras: list
    region: Box
    seed: int = 0

    def camera(self, image_id: str) -> CameraRecord:
        for rec in self.cameras:
            if rec.image_id == image_id:
                return rec
        raise KeyError(image_id)


def _sample_rect(rng, origin, e1, e2, density):
    """Uniform samples on the parallelogram origin + a*e1 + b*e2."""
    area = np.linalg.norm(np.cross(e1, e2))
    n = max(1, int(round(area * density)))
    ab = rng.random((n, 2))
    return np.asarray(origin) + ab[:, :1] * np.asarray(e1) + ab[:, 1:] * np.asarray(e2)


def _box_surface(rng, lo, hi, density):
    (x0, y0, z0), (x1, y1, z1) = lo, hi
    dx, dy, dz = x1 - x0, y1 - y0, z1 - z0
    faces = [
        ((x0, y0, z0), (dx, 0, 0), (0, 0, dz)),
        ((x0, y1, z0), (dx, 0, 0), (0, 0, dz)),
        ((x0, y0, z0), (0, dy, 0), (0, 0, dz)),
        ((x1, y0, z0), (0, dy, 0), (0, 0, dz)),
        ((x0, y0, z1), (dx, 0, 0), (0, dy, 0)),
    ]
    return np.concatenate([_sample_rect(rng, o, a, b, density) for o, a, b in faces])


def _cylinder(rng, base, radius, height, density):
    n = max(1, int(round(2 * np.pi * radius * height * density)))
    th = rng.random(n) * 2 * np.pi
    z = rng.random(n) * height
    return np.stack([base[0] + radius * np.cos(th), base[1] + radius * np.sin(th), base[2] + z], axis=1)


def _sphere(rng, center, radius, density):
    n = max(1, int(round(4 * np.pi * radius**2 * density)))
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.asarray(center) + radius * v


def generate_scene(seed: int, spec: SceneSpec | None = None) -> SceneBundle:
    """Deterministic intersection scene for ``seed``."""
    spec = spec or SceneSpec()
    if spec.poses.num_images == 0:
        raise ValueError("pose sampling spec yields no cameras")
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(spec.region.lo), np.asarray(spec.region.hi)
    rw = spec.road_half_width
    parts = []

    ground = _sample_rect(rng, (lo[0], lo[1], 0.0), (hi[0] - lo[0], 0, 0), (0, hi[1] - lo[1], 0), spec.density)
    sidewalk = (np.abs(ground[:, 0]) > rw) & (np.abs(ground[:, 1]) > rw)
    ground[sidewalk, 2] += spec.kerb_height
    parts.append(ground)

    inner = rw + 4.0
    for sx in (-1, 1):
        for sy in (-1, 1):
            for _ in range(rng.integers(spec.buildings_per_quadrant[0], spec.buildings_per_quadrant[1] + 1)):
                w, d = rng.uniform(8.0, 20.0, size=2)
                cx = sx * rng.uniform(inner + w / 2, hi[0] - 2.0 - w / 2)
                cy = sy * rng.uniform(inner + d / 2, hi[1] - 2.0 - d / 2)
                h = rng.uniform(*spec.building_height)
                parts.append(_box_surface(rng, (cx - w / 2, cy - d / 2, spec.kerb_height),
                                          (cx + w / 2, cy + d / 2, h), spec.density))

    corners = [(sx * (rw + 1.0), sy * (rw + 1.0)) for sx in (-1, 1) for sy in (-1, 1)]
    for i in range(spec.n_poles):
        if i < len(corners):
            x, y = corners[i]
        else:
            along = rng.uniform(rw + 2.0, hi[0] - 3.0) * rng.choice([-1, 1])
            side = (rw + 1.0) * rng.choice([-1, 1])
            x, y = (along, side) if rng.random() < 0.5 else (side, along)
        height = rng.uniform(4.0, 9.0)
        parts.append(_cylinder(rng, (x, y, spec.kerb_height), 0.2, height, spec.density * 4))
        # signal head / lamp arm
        parts.append(_box_surface(rng, (x - 0.4, y - 0.4, height), (x + 0.4, y + 0.4, height + 1.0), spec.density * 4))

    for _ in range(spec.n_trees):
        x = rng.choice([-1, 1]) * rng.uniform(rw + 2.0, hi[0] - 3.0)
        y = rng.choice([-1, 1]) * (rw + 2.5)
        if rng.random() < 0.5:
            x, y = y, x
        trunk = rng.uniform(2.0, 4.0)
        parts.append(_cylinder(rng, (x, y, spec.kerb_height), 0.25, trunk, spec.density * 2))
        parts.append(_sphere(rng, (x, y, trunk + 1.5), rng.uniform(1.5, 2.5), spec.density))

    pts = np.concatenate(parts)
    pts = pts[spec.region.contains(pts)]
    cloud = voxel_downsample(PointCloud(pts), spec.resolution)
    cameras = sample_poses(spec.poses)
    bundle = SceneBundle(cloud, cameras, spec.region, seed)
    expanded = spec.region.expanded(10.0)
    if not all(expanded.contains(rec.pose.center)[0] for rec in cameras):
        raise ValueError("camera centre outside the scene region")
    return bundle


def voxel_downsample(cloud, resolution: float) -> PointCloud:
    """Replace the points of every occupied ``resolution`` cube by their centroid.

    Output is ordered by cell key, so the result is independent of input order.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    keys = np.floor(pts / resolution).astype(np.int64)
    keys -= keys.min(axis=0)
    span = keys.max(axis=0) + 1
    flat = (keys[:, 0] * span[1] + keys[:, 1]) * span[2] + keys[:, 2]
    uniq, inverse, counts = np.unique(flat, return_inverse=True, return_counts=True)
    out = np.empty((len(uniq), 3))
    for k in range(3):
        out[:, k] = np.bincount(inverse, weights=pts[:, k], minlength=len(uniq)) / counts
    return PointCloud(out)


@dataclass(frozen=True)
class Voxel:
    index: int          # position in the candidate tiling, row-major over (x, y, z)
    box: Box
    indices: np.ndarray


@dataclass(frozen=True)
class VoxelPartition:
    voxel_size: float
    stride: float
    voxels: list
    num_candidates: int


def _starts(lo: float, hi: float, size: float, stride: float) -> list:
    extent = hi - lo
    if extent <= size:
        return [lo]
    n = int(np.floor((extent - size) / stride + 1e-9)) + 1
    starts = [lo + k * stride for k in range(n)]
    if starts[-1] + size < hi - 1e-9:
        starts.append(hi - size)
    return starts


def partition_voxels(cloud, region: Box = DEFAULT_REGION, voxel_size: float = VOXEL_SIZE,
                     stride: float = VOXEL_STRIDE) -> VoxelPartition:
    if not (voxel_size >= stride > 0):
        raise ValueError("need voxel_size >= stride > 0")
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    axes = [_starts(region.lo[k], region.hi[k], voxel_size, stride) for k in range(3)]
    voxels, count = [], 0
    for x0 in axes[0]:
        for y0 in axes[1]:
            for z0 in axes[2]:
                box = Box((x0, y0, z0), (x0 + voxel_size, y0 + voxel_size, z0 + voxel_size))
                idx = np.flatnonzero(box.contains(pts))
                if len(idx):
                    voxels.append(Voxel(count, box, idx))
                count += 1
    return VoxelPartition(voxel_size, stride, voxels, count)


def view_fractions(part: VoxelPartition, cloud, cameras) -> np.ndarray:
    """(num_voxels, num_cameras) fraction of each voxel's points inside each image."""
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    cols = np.ascontiguousarray(pts.T)
    member = np.zeros((len(part.voxels), len(pts)), dtype=np.float32)
    for i, vox in enumerate(part.voxels):
        member[i, vox.indices] = 1.0
    sizes = np.array([len(v.indices) for v in part.voxels], dtype=np.float64)
    out = np.zeros((len(part.voxels), len(cameras)))
    for j, rec in enumerate(cameras):
        # float32 counts are exact below 2**24 points
        out[:, j] = (member @ visible_mask(rec.camera, rec.pose, cols).astype(np.float32)) / sizes
    return out


def associate_images(part: VoxelPartition, cloud, cameras, threshold: float = ASSOCIATION_FRACTION) -> dict:
    """Map voxel index -> image ids whose in-view fraction exceeds ``threshold``."""
    frac = view_fractions(part, cloud, cameras)
    return {vox.index: [cameras[j].image_id for j in np.flatnonzero(frac[i] > threshold)]
            for i, vox in enumerate(part.voxels)}


# ---------------------------------------------------------------------------
# oracle features
# ---------------------------------------------------------------------------

@dataclass
class OracleSample:
    features: FeatureSet
    gt: CorrespondenceSet         # in-frustum group centres and their true pixels
    in_frustum: np.ndarray        # (M,) bool
    gt_patches: np.ndarray        # (len(gt), 2) (row, col)
    outlier_groups: np.ndarray    # group ids given a wrong patch descriptor
    fine_collisions: np.ndarray   # group ids whose fine splat was overwritten


def random_descriptors(seed, n: int, channels: int) -> np.ndarray:
    """Seeded random unit descriptors, float32 (n, channels)."""
    return _unit(np.random.default_rng(seed), (n, channels))


def _unit(rng, shape):
    """Random unit rows; a normalised uniform cube sample is enough for descriptors
    and several times cheaper than Gaussian draws on dense maps."""
    v = rng.random(shape, dtype=np.float32)
    v -= np.float32(0.5)
    v /= np.sqrt(np.einsum("...i,...i->...", v, v))[..., None]
    return v


def _perturb(rng, v, sigma):
    if sigma == 0:
        return v
    noisy = v + rng.standard_normal(v.shape, dtype=np.float32) * np.float32(sigma / np.sqrt(v.shape[-1]))
    return noisy / np.linalg.norm(noisy, axis=-1, keepdims=True)


def _with_similarity(rng, d, s):
    """Unit rows whose dot product with the unit rows of ``d`` equals ``s``."""
    d64 = np.atleast_2d(d).astype(np.float64)
    s = np.asarray(s, dtype=np.float64).reshape(-1, 1)
    n = rng.standard_normal(d64.shape)
    n -= np.einsum("ij,ij->i", n, d64)[:, None] * d64
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return s * d64 + np.sqrt(np.maximum(0.0, 1.0 - s * s)) * n


def fine_coordinate(pixels):
    """Full-resolution pixel -> half-resolution map coordinate."""
    return (np.asarray(pixels, dtype=np.float64) - 0.5) / 2.0


def full_coordinate(fine):
    return 2.0 * np.asarray(fine, dtype=np.float64) + 0.5


def synthesize_features(points, cam: CameraModel, pose: Pose, groups: GroupSet, grid: PatchGrid,
                        noise_sigma: float = 0.0, seed: int = 0, *, outlier_rate: float = 0.0,
                        fine_temperature: float = 0.05, channels: int = 256,
                        fine_channels: int = 64, outlier_min_distance: int = 3,
                        fine_points=None) -> OracleSample:
    """Oracle descriptors that make the true correspondences recoverable.

    Every patch gets a random unit descriptor; an in-frustum group copies the
    descriptor of the patch its centre projects into (plus noise of norm about
    ``noise_sigma``).  Other groups get independent random descriptors.  At
    fine resolution each group centre's point descriptor is splatted
    bilinearly onto the 2x2 fine cells around its true pixel, with
    similarities chosen so a soft-argmax at ``fine_temperature`` lands on the
    true sub-pixel location.  ``outlier_rate`` of the in-frustum groups copy a
    patch at least ``outlier_min_distance`` patches away instead.

    ``fine_points`` supplies per-point fine descriptors (unit rows), e.g. one
    set shared by every image of a voxel; random ones are drawn otherwise.
    """
    pts = np.asarray(points, dtype=np.float64)
    rng = np.random.default_rng(seed)
    m = groups.m
    uv, depth, visible = project_points(cam, pose, groups.centers)
    in_frustum = visible.copy()
    gt_ids = np.flatnonzero(in_frustum)
    if len(gt_ids) == 0:
        raise ValueError("no group centre projects into the image")

    patch_desc = _unit(rng, (grid.num_patches, channels))
    group_desc = _unit(rng, (m, channels))
    gt_patches = patches_of_pixels(grid, uv[gt_ids])
    gt_flat = grid.flat(gt_patches[:, 0], gt_patches[:, 1])
    target = gt_flat.copy()

    n_out = int(round(outlier_rate * len(gt_ids)))
    outliers = np.sort(rng.choice(len(gt_ids), size=n_out, replace=False)) if n_out else np.zeros(0, np.int64)
    coords = grid.coords()
    for k in outliers:
        cheb = np.abs(coords - gt_patches[k]).max(axis=1)
        far = np.flatnonzero(cheb >= outlier_min_distance)
        target[k] = rng.choice(far)
    group_desc[gt_ids] = _perturb(rng, patch_desc[target], noise_sigma)

    fh, fw = cam.height // 2, cam.width // 2
    fine_image = _unit(rng, (fh, fw, fine_channels))
    if fine_points is None:
        fine_points = _unit(rng, (len(pts), fine_channels))
    elif np.shape(fine_points) != (len(pts), fine_channels):
        raise ValueError(f"fine_points must be ({len(pts)}, {fine_channels})")
    order = gt_ids[np.argsort(-depth[gt_ids], kind="stable")]  # far first, near overwrites
    fxy = fine_coordinate(uv[order])
    c0 = np.floor(fxy[:, 0]).astype(np.int64)
    r0 = np.floor(fxy[:, 1]).astype(np.int64)
    ax, ay = fxy[:, 0] - c0, fxy[:, 1] - r0
    rows = np.concatenate([r0, r0, r0 + 1, r0 + 1])
    cols = np.concatenate([c0, c0 + 1, c0, c0 + 1])
    weight = np.concatenate([(1 - ay) * (1 - ax), (1 - ay) * ax, ay * (1 - ax), ay * ax])
    rank = np.tile(np.arange(len(order)), 4)
    inside = (rows >= 0) & (rows < fh) & (cols >= 0) & (cols < fw)
    rows, cols, weight, rank = rows[inside], cols[inside], weight[inside], rank[inside]
    cell = rows * fw + cols
    # the nearest splat (highest rank) owns each cell
    by_cell = np.lexsort((-rank, cell))
    first = np.ones(len(by_cell), dtype=bool)
    first[1:] = cell[by_cell][1:] != cell[by_cell][:-1]
    win = by_cell[first]
    collided = np.unique(order[rank[by_cell[~first]]])
    with np.errstate(divide="ignore"):
        sim = np.where(weight[win] > 0, 1.0 + fine_temperature * np.log(weight[win]), -1.0)
    d = fine_points[groups.center_indices[order[rank[win]]]]
    vec = _with_similarity(rng, d, np.maximum(sim, -1.0)).astype(np.float32)
    fine_image[rows[win], cols[win]] = _perturb(rng, vec, noise_sigma)

    gt = CorrespondenceSet(groups.center_indices[gt_ids], groups.centers[gt_ids], uv[gt_ids],
                           np.ones(len(gt_ids)), gt_ids)
    feats = FeatureSet(patch_desc, group_desc, fine_image, fine_points)
    return OracleSample(feats, gt, in_frustum, gt_patches, gt_ids[outliers],
                        np.array(sorted(collided), dtype=np.int64))


def synthesize_oracle_features(scene: SceneBundle, image_id: str, grouping: GroupSet, grid: PatchGrid,
                               noise_sigma: float = 0.0, seed: int = 0, **kwargs) -> OracleSample:
    """:func:`synthesize_features` for one camera of a scene bundle.

    The grid's resolution decides the camera scale: the scene camera is
    resized to ``grid.rows*s x grid.cols*s``.
    """
    rec = scene.camera(image_id)
    s = grid.patch_size_s
    cam = rec.camera.resized(grid.cols * s, grid.rows * s)
    return synthesize_features(scene.cloud.points, cam, rec.pose, grouping, grid, noise_sigma, seed, **kwargs)
