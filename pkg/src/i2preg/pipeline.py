"""Per-image registration chain on oracle features.

scene -> associated voxel -> subsample + FPS grouping -> oracle features ->
(optional fusion forward + attention supervision) -> super-point filter ->
coarse match -> fine match -> EPnP-RANSAC -> errors.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import fusion_forward, gal_loss, gal_masks, group_positions, init_params, patch_positions
from .config import PipelineConfig
from .geom import CameraModel
from .grouping import GroupSet, PatchGrid, farthest_point_sampling
from .io import write_pgm
from .matching import coarse_match, cosine_similarity_matrix, fine_match, superpoint_filter
from .pose import RegistrationResult, epnp_ransac
from .scenegen import (OracleSample, SceneBundle, partition_voxels, random_descriptors, synthesize_features,
                       view_fractions)
from .types import CorrespondenceSet, FeatureSet

FINE_CHANNELS = 64


@dataclass
class VoxelInput:
    voxel_index: int
    point_ids: np.ndarray  # rows of the scene cloud
    points: np.ndarray
    groups: GroupSet
    fine_points: np.ndarray  # per-point fine descriptors shared by every image of the voxel


@dataclass
class ImageOutcome:
    image_id: str
    result: RegistrationResult
    voxel_index: int = -1
    num_kept: int = 0
    correspondences: CorrespondenceSet = field(default_factory=CorrespondenceSet.empty)
    injected_outliers: int = 0
    outliers_in_inliers: int = 0
    gal_loss: float | None = None

    def extra(self) -> dict:
        out = {"voxel": self.voxel_index, "num_kept": self.num_kept,
               "num_matches": len(self.correspondences),
               "injected_outliers": self.injected_outliers,
               "outliers_in_inliers": self.outliers_in_inliers,
               # scene-cloud rows of the inlier points
               "inliers": [int(i) for i in self.correspondences.point_index[self.result.inlier_ids]]}
        if self.gal_loss is not None:
            out["gal_loss"] = self.gal_loss
        return out


class SceneIndex:
    """Voxel partition, image association and per-voxel grouping cache."""

    def __init__(self, scene: SceneBundle, cfg: PipelineConfig):
        self.scene = scene
        self.cfg = cfg
        self.grid = PatchGrid.for_image(cfg.image_height, cfg.image_width, cfg.patch_size)
        self.partition = partition_voxels(scene.cloud, scene.region)
        if not self.partition.voxels:
            raise ValueError("scene has no occupied voxel")
        self.fractions = view_fractions(self.partition, scene.cloud, scene.cameras)
        self._cache = {}
        self._lock = threading.Lock()
        self._params = None

    def voxel_for(self, j: int) -> int:
        """Position in ``partition.voxels`` with the largest in-view fraction for camera ``j``."""
        return int(np.argmax(self.fractions[:, j]))

    def associated(self, j: int) -> bool:
        return bool(self.fractions[self.voxel_for(j), j] > 0.30)

    def voxel_input(self, pos: int) -> VoxelInput:
        with self._lock:
            if pos not in self._cache:
                self._cache[pos] = self._build(pos)
            return self._cache[pos]

    def _build(self, pos: int) -> VoxelInput:
        vox = self.partition.voxels[pos]
        ids = vox.indices
        n = self.cfg.num_points
        if len(ids) > n:
            rng = np.random.default_rng([self.cfg.seed, self.scene.seed, vox.index])
            ids = np.sort(rng.choice(ids, size=n, replace=False))
        pts = self.scene.cloud.points[ids]
        groups = farthest_point_sampling(pts, min(self.cfg.num_groups, len(pts)))
        fine = random_descriptors([self.cfg.seed, self.scene.seed, vox.index, 1], len(pts), FINE_CHANNELS)
        return VoxelInput(vox.index, ids, pts, groups, fine)

    def fusion_params(self):
        with self._lock:
            if self._params is None:
                self._params = init_params(self.cfg.fusion, self.cfg.seed,
                                           output_scale=self.cfg.fusion_output_scale)
            return self._params

    def camera(self, j: int) -> CameraModel:
        return self.scene.cameras[j].camera.resized(self.cfg.image_width, self.cfg.image_height)


def oracle_for_image(index: SceneIndex, j: int) -> tuple:
    cfg = index.cfg
    rec = index.scene.cameras[j]
    vin = index.voxel_input(index.voxel_for(j))
    oracle = synthesize_features(vin.points, index.camera(j), rec.pose, vin.groups, index.grid,
                                 cfg.noise_sigma, [cfg.seed, index.scene.seed, j],
                                 outlier_rate=cfg.outlier_rate,
                                 fine_temperature=cfg.oracle_fine_temperature,
                                 channels=cfg.fusion.channels, fine_channels=FINE_CHANNELS,
                                 fine_points=vin.fine_points)
    return vin, oracle


def _similarity_mosaic(features: FeatureSet, kept, grid: PatchGrid, limit: int = 8, scale: int = 8):
    ids = np.asarray(kept)[:limit]
    sims = cosine_similarity_matrix(features.coarse_points[ids], features.coarse_image)
    maps = sims.reshape(len(ids), grid.rows, grid.cols)
    img = np.clip(np.rint((maps + 1.0) * 127.5), 0, 255).astype(np.uint8)
    img = np.repeat(np.repeat(img, scale, axis=1), scale, axis=2)
    return img.reshape(-1, img.shape[2])


def register_image(index: SceneIndex, j: int, dump_dir=None) -> ImageOutcome:
    cfg = index.cfg
    rec = index.scene.cameras[j]
    cam = index.camera(j)
    try:
        vin, oracle = oracle_for_image(index, j)
    except ValueError:
        return ImageOutcome(rec.image_id, RegistrationResult(None).evaluate(rec.pose, cfg.eval))
    groups = vin.groups
    # oracle detection scores are the in-frustum labels themselves
    kept, _ = superpoint_filter(oracle.in_frustum.astype(np.float64), cfg.match.superpoint_threshold)
    features = oracle.features
    outcome = ImageOutcome(rec.image_id, RegistrationResult(None), vin.voxel_index, len(kept))

    if not cfg.bypass_fusion:
        fused = fusion_forward(features.coarse_image, features.coarse_points, index.fusion_params(), cfg.fusion,
                               img_pos=patch_positions(index.grid), pts_pos=group_positions(groups.centers))
        masks = gal_masks(cam, rec.pose, index.grid, groups, cfg.gal)
        outcome.gal_loss = gal_loss(fused.map_i2p, fused.map_p2i, masks)[0]
        features = FeatureSet(fused.f_img, fused.f_pts, features.fine_image, features.fine_points)

    if dump_dir is not None and len(kept):
        write_pgm(Path(dump_dir) / f"{rec.image_id}.pgm", _similarity_mosaic(features, kept, index.grid))

    if len(kept) < 4:
        outcome.result = RegistrationResult(None).evaluate(rec.pose, cfg.eval)
        return outcome
    coarse = coarse_match(features, kept, index.grid, groups, cfg.match.coarse_temperature, cfg.match.coarse_window)
    fine, _ = fine_match(features, coarse, cfg.match.fine_window_w, cfg.match.fine_temperature)
    fine.point_index = vin.point_ids[fine.point_index]  # report scene-cloud rows
    outcome.correspondences = fine
    is_outlier = np.isin(fine.group_ids, oracle.outlier_groups)
    outcome.injected_outliers = int(is_outlier.sum())
    if len(fine) < 4:
        outcome.result = RegistrationResult(None).evaluate(rec.pose, cfg.eval)
        return outcome
    result = epnp_ransac(fine.points, fine.pixels, cam, cfg.ransac)
    result.evaluate(rec.pose, cfg.eval)
    outcome.result = result
    outcome.outliers_in_inliers = int(is_outlier[result.inlier_ids].sum())
    return outcome


def run_scene(scene: SceneBundle, cfg: PipelineConfig, threads: int = 1, dump_dir=None,
              image_ids=None) -> list:
    """Register every camera (or ``image_ids``); outcomes come back in input order."""
    index = SceneIndex(scene, cfg)
    if image_ids is None:
        order = list(range(len(scene.cameras)))
    else:
        pos = {rec.image_id: j for j, rec in enumerate(scene.cameras)}
        order = [pos[i] for i in image_ids]
    for v in sorted({index.voxel_for(j) for j in order}):
        index.voxel_input(v)
    if dump_dir is not None:
        Path(dump_dir).mkdir(parents=True, exist_ok=True)
    if threads <= 1:
        return [register_image(index, j, dump_dir) for j in order]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda j: register_image(index, j, dump_dir), order))


def oracle_sample(scene: SceneBundle, cfg: PipelineConfig, image_id: str) -> tuple:
    """``(VoxelInput, OracleSample, camera)`` for one image, as the pipeline sees it."""
    index = SceneIndex(scene, cfg)
    pos = [k for k, rec in enumerate(scene.cameras) if rec.image_id == image_id]
    if not pos:
        raise KeyError(image_id)
    j = pos[0]
    vin, oracle = oracle_for_image(index, j)
    return vin, oracle, index.camera(j)


__all__ = ["SceneIndex", "VoxelInput", "ImageOutcome", "OracleSample", "register_image", "run_scene",
           "oracle_sample"]
