import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_pose
from i2preg.attention import (AttentionMap, Direction, FusionConfig, GalConfig, Label, TriMask, fusion_forward,
                              gal_loss, gal_masks, group_positions, init_params, load_param_blob, param_shapes,
                              patch_positions, save_param_blob, sinusoidal_embedding, zero_params)
from i2preg.geom import CameraModel, Pose, patch_rays, point_ray_distance_matrix
from i2preg.gradcheck import central_difference, relative_error
from i2preg.grouping import GroupSet, PatchGrid

seeds = st.integers(0, 2**32 - 1)
SMALL = FusionConfig(n_blocks=2, n_heads=2, channels=16, latent_dim=16)


def _groups(centers):
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    return GroupSet(centers, np.arange(len(centers)), np.arange(len(centers)))


# ---------------------------------------------------------------------------
# fusion forward
# ---------------------------------------------------------------------------

def test_zero_weights_pass_features_through(rng):
    cfg = FusionConfig()
    f_img, f_pts = rng.normal(size=(24, 256)), rng.normal(size=(10, 256))
    out = fusion_forward(f_img, f_pts, zero_params(cfg), cfg, rng.normal(size=(24, 2)), rng.normal(size=(10, 3)))
    assert np.array_equal(out.f_img, f_img) and np.array_equal(out.f_pts, f_pts)
    assert np.all(out.map_i2p.logits == 0) and np.all(out.map_p2i.logits == 0)
    assert out.map_i2p.logits.shape == (24, 10) and out.map_p2i.logits.shape == (10, 24)
    assert out.map_i2p.direction is Direction.I2P and out.map_p2i.direction is Direction.P2I


def test_single_patch_single_group_hand_evaluation(rng):
    cfg = FusionConfig(n_blocks=1, n_heads=1, channels=4, latent_dim=4)
    params = zero_params(cfg)
    wq, wk = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    params["block0.cross_i2p.wq"], params["block0.cross_i2p.wk"] = wq, wk
    # zero-mean, unit-variance rows: layer norm only divides by sqrt(1 + eps)
    f_img = np.array([[1.0, -1.0, 1.0, -1.0]])
    f_pts = np.array([[1.0, 1.0, -1.0, -1.0]])
    out = fusion_forward(f_img, f_pts, params, cfg)
    s = 1.0 / (1.0 + 1e-5)
    expect = s * ((f_img @ wq) @ (f_pts @ wk).T)[0, 0]
    assert out.map_i2p.logits.shape == (1, 1)
    assert out.map_i2p.logits[0, 0] == pytest.approx(expect, rel=1e-12)


@given(seeds)
@settings(max_examples=10, deadline=None)
def test_permuting_groups_permutes_logit_columns(seed):
    rng = np.random.default_rng(seed)
    params = init_params(SMALL, seed=1)
    f_img, f_pts = rng.normal(size=(12, 16)), rng.normal(size=(7, 16))
    pi, pp = rng.normal(size=(12, 2)) * 5, rng.normal(size=(7, 3)) * 5
    perm = rng.permutation(7)
    a = fusion_forward(f_img, f_pts, params, SMALL, pi, pp)
    b = fusion_forward(f_img, f_pts[perm], params, SMALL, pi, pp[perm])
    assert np.allclose(b.map_i2p.logits, a.map_i2p.logits[:, perm], atol=1e-10)
    assert np.allclose(b.map_p2i.logits, a.map_p2i.logits[perm], atol=1e-10)
    assert np.allclose(b.f_pts, a.f_pts[perm], atol=1e-10)
    assert np.allclose(b.f_img, a.f_img, atol=1e-10)


def test_attention_rows_sum_to_one(rng):
    params = init_params(SMALL, seed=3, scale=1.0)
    out = fusion_forward(rng.normal(size=(20, 16)), rng.normal(size=(9, 16)), params, SMALL)
    assert np.abs(out.probs_i2p.sum(-1) - 1).max() < 1e-6
    assert np.abs(out.probs_p2i.sum(-1) - 1).max() < 1e-6
    assert np.allclose(out.head_logits_i2p.mean(axis=0), out.map_i2p.logits)


def test_fusion_shape_errors(rng):
    params = init_params(SMALL)
    with pytest.raises(ValueError):
        fusion_forward(rng.normal(size=(5, 15)), rng.normal(size=(3, 16)), params, SMALL)
    with pytest.raises(ValueError):
        fusion_forward(rng.normal(size=(5, 16)), rng.normal(size=(3, 16)), params, SMALL,
                       img_pos=rng.normal(size=(4, 2)))
    del params["block1.cross_p2i.wo"]
    with pytest.raises(ValueError):
        fusion_forward(rng.normal(size=(5, 16)), rng.normal(size=(3, 16)), params, SMALL)


def test_fusion_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(channels=10, n_heads=4)
    with pytest.raises(ValueError):
        FusionConfig(n_blocks=0)
    cfg = FusionConfig()
    assert (cfg.n_blocks, cfg.n_heads, cfg.channels, cfg.latent_dim) == (4, 4, 256, 256)


def test_param_blob_round_trip(tmp_path):
    params = init_params(SMALL, seed=4)
    save_param_blob(tmp_path / "p.bin", params)
    back = load_param_blob(tmp_path / "p.bin")
    assert set(back) == set(param_shapes(SMALL))
    for k, v in params.items():
        assert back[k].shape == v.shape
        assert np.array_equal(back[k], v.astype(np.float32).astype(np.float64))


def test_param_blob_rejects_trailing_bytes(tmp_path):
    save_param_blob(tmp_path / "p.bin", {"a": np.ones(3)})
    with open(tmp_path / "p.bin", "ab") as fh:
        fh.write(b"\0\0\0\0")
    with pytest.raises(ValueError):
        load_param_blob(tmp_path / "p.bin")


def test_positional_embeddings():
    emb = sinusoidal_embedding(np.array([[0.0, 0.0, 0.0]]), 256)
    assert emb.shape == (1, 256)
    # sin(0) = 0, cos(0) = 1 for every band of each axis
    bands = 256 // 6
    assert np.all(emb[0, :bands] == 0) and np.all(emb[0, bands:2 * bands] == 1)
    assert np.all(emb[0, 6 * bands:] == 0)
    grid = PatchGrid.for_image(288, 512, 16)
    assert patch_positions(grid).shape == (576, 2)
    pos = group_positions(np.array([[0, 0, 0], [2, 1, 1], [1, 2, 0.5]], dtype=float))
    assert pos.min() == 0.0 and pos.max() == 100.0


# ---------------------------------------------------------------------------
# GAL masks
# ---------------------------------------------------------------------------

@pytest.fixture
def grid_cam():
    grid = PatchGrid.for_image(288, 512, 16)
    return grid, CameraModel(256.0, 256.0, 256.0, 144.0, 512, 288)


def test_on_ray_point_positive_and_offset_point_negative(rng, grid_cam):
    grid, cam = grid_cam
    for _ in range(25):
        pose = random_pose(rng, 10.0)
        origin, dirs = patch_rays(cam, pose, 16)
        j = rng.integers(len(dirs))
        d = dirs[j]
        n = np.cross(d, rng.normal(size=3))
        n /= np.linalg.norm(n)
        t = rng.uniform(2, 40)
        centers = [origin + t * d, origin + t * d + 6.0 * n]
        mi, mp = gal_masks(cam, pose, grid, _groups(centers))
        assert mi.labels[j, 0] == Label.POSITIVE and mp.labels[0, j] == Label.POSITIVE
        assert mp.labels[1, j] == Label.NEGATIVE


def test_fifteen_degrees_is_unsupervised(grid_cam):
    grid, cam = grid_cam
    origin, dirs = patch_rays(cam, Pose.identity(), 16)
    j = 9 * 32 + 16
    d = dirs[j]
    n = np.cross(d, [1.0, 0.0, 0.0])
    n /= np.linalg.norm(n)
    a = math.radians(15.0)
    p = origin + 20.0 * (math.cos(a) * d + math.sin(a) * n)
    mi, _ = gal_masks(cam, Pose.identity(), grid, _groups([p]))
    assert mi.labels[j, 0] == Label.UNSUPERVISED


def test_far_from_every_ray_gives_negative_row(grid_cam):
    grid, cam = grid_cam
    # ten metres straight up from the camera: at least six from every patch ray
    p = np.array([0.0, -10.0, 0.0])
    origin, dirs = patch_rays(cam, Pose.identity(), 16)
    assert point_ray_distance_matrix(origin, dirs, p[None]).min() >= 6.0
    _, mp = gal_masks(cam, Pose.identity(), grid, _groups([p]))
    assert np.all(mp.labels[0] == Label.NEGATIVE)


def test_no_groups_gives_empty_masks(grid_cam):
    grid, cam = grid_cam
    mi, mp = gal_masks(cam, Pose.identity(), grid, _groups(np.zeros((0, 3))))
    assert mi.labels.shape == (576, 0) and mp.labels.shape == (0, 576)
    loss, gi, gp = gal_loss(np.zeros((576, 0)), np.zeros((0, 576)), (mi, mp))
    assert loss == 0.0 and gi.size == 0 and gp.size == 0


def test_masks_monotone_in_thresholds(rng, grid_cam):
    grid, cam = grid_cam
    pose = random_pose(rng, 5.0)
    centers = pose.center + rng.normal(size=(60, 3)) * 15
    groups = _groups(centers)
    prev = None
    for k in np.linspace(2, 30, 8):
        mi, mp = gal_masks(cam, pose, grid, groups, GalConfig(k, k + 10, k / 4, k / 4 + 2))
        cur = (mi.count(Label.POSITIVE), mi.count(Label.NEGATIVE), mp.count(Label.POSITIVE), mp.count(Label.NEGATIVE))
        if prev is not None:
            assert cur[0] >= prev[0] and cur[2] >= prev[2]
            assert cur[1] <= prev[1] and cur[3] <= prev[3]
        prev = cur


def test_closer_groups_cover_more_patches(rng, grid_cam):
    grid, cam = grid_cam
    origin, dirs = patch_rays(cam, Pose.identity(), 16)
    for _ in range(20):
        d = dirs[rng.integers(len(dirs))]
        z1, z2 = np.sort(rng.uniform(3, 60, 2))
        _, mp = gal_masks(cam, Pose.identity(), grid, _groups([origin + z1 * d, origin + z2 * d]))
        near, far = (mp.labels == Label.POSITIVE).sum(axis=1)
        assert far <= near


def test_gal_config_validation():
    with pytest.raises(ValueError):
        GalConfig(theta_low=20, theta_up=10)
    with pytest.raises(ValueError):
        GalConfig(d_low=0)


# ---------------------------------------------------------------------------
# GAL loss
# ---------------------------------------------------------------------------

def _tri(labels):
    return TriMask(np.asarray(labels, dtype=np.int8))


def test_all_unsupervised_is_zero(rng):
    x = rng.normal(size=(4, 3))
    masks = (_tri(np.full((4, 3), -1)), _tri(np.full((3, 4), -1)))
    loss, gi, gp = gal_loss(x, x.T, masks)
    assert loss == 0.0 and np.all(gi == 0) and np.all(gp == 0)


def test_single_positive_at_zero_logit():
    masks = (_tri([[1]]), _tri([[-1]]))
    loss, gi, gp = gal_loss(AttentionMap(np.zeros((1, 1)), Direction.I2P),
                            AttentionMap(np.zeros((1, 1)), Direction.P2I), masks)
    assert loss == pytest.approx(0.6931471805599453, abs=1e-15)
    assert gi[0, 0] == -0.5 and gp[0, 0] == 0.0


@given(seeds)
@settings(max_examples=25)
def test_gal_gradient_finite_difference(seed):
    rng = np.random.default_rng(seed)
    li, lp = rng.normal(0, 3, size=(8, 8)), rng.normal(0, 3, size=(8, 8))
    masks = (_tri(rng.integers(-1, 2, size=(8, 8))), _tri(rng.integers(-1, 2, size=(8, 8))))
    _, gi, gp = gal_loss(li, lp, masks)
    num_i = central_difference(lambda x: gal_loss(x, lp, masks)[0], li)
    num_p = central_difference(lambda x: gal_loss(li, x, masks)[0], lp)
    assert relative_error(gi, num_i) < 1e-6 and relative_error(gp, num_p) < 1e-6


def test_gal_loss_stable_at_large_logits():
    x = np.array([[100.0, -100.0]])
    masks = (_tri([[0, 1]]), _tri([[1], [0]]))
    loss, gi, gp = gal_loss(x, x.T, masks)
    # two confidently wrong entries cost 100 each, the agreeing ones about 0
    assert math.isfinite(loss) and loss == pytest.approx(200.0)
    assert np.all(np.isfinite(gi)) and np.all(np.isfinite(gp))


def test_per_head_logits_broadcast_the_mask(rng):
    heads = rng.normal(size=(4, 5, 3))
    masks = (_tri(rng.integers(-1, 2, size=(5, 3))), _tri(rng.integers(-1, 2, size=(3, 5))))
    loss, gi, _ = gal_loss(heads, np.zeros((4, 3, 5)), masks)
    per = sum(gal_loss(h, np.zeros((3, 5)), masks)[0] for h in heads)
    assert loss == pytest.approx(per, rel=1e-12) and gi.shape == heads.shape


def test_gal_loss_shape_mismatch():
    with pytest.raises(ValueError):
        gal_loss(np.zeros((2, 2)), np.zeros((2, 2)), (_tri(np.zeros((2, 3))), _tri(np.zeros((2, 2)))))
