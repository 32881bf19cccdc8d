import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from i2preg.grouping import (PatchGrid, assign_to_centers, farthest_point_sampling, patch_of_pixel,
                             patches_of_pixels)


def brute_force_fps(points, m, seed_index=0):
    """O(N^2 m) reference: recompute every min-distance from scratch."""
    chosen = [seed_index]
    for _ in range(1, m):
        best, best_d = None, -1.0
        for i, p in enumerate(points):
            if i in chosen:
                continue
            d = min(float(np.sum((p - points[c]) ** 2)) for c in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return np.array(chosen)


def brute_force_assignment(points, centers):
    d = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    return np.argmin(d, axis=1)  # argmin picks the lowest id on ties


def test_fps_matches_brute_force(rng):
    pts = rng.normal(size=(100, 3))
    g = farthest_point_sampling(pts, 8)
    assert np.array_equal(g.center_indices, brute_force_fps(pts, 8))
    assert np.array_equal(g.assignment, brute_force_assignment(pts, g.centers))


def test_fps_all_points(rng):
    pts = rng.normal(size=(30, 3))
    g = farthest_point_sampling(pts, 30)
    assert sorted(g.center_indices) == list(range(30))
    # every point is its own centre
    assert np.array_equal(g.center_indices[g.assignment], np.arange(30))


def test_fps_single_group(rng):
    pts = rng.normal(size=(50, 3))
    g = farthest_point_sampling(pts, 1, seed_index=7)
    assert list(g.center_indices) == [7]
    assert np.all(g.assignment == 0)


def test_fps_rejects_bad_m(rng):
    pts = rng.normal(size=(5, 3))
    with pytest.raises(ValueError):
        farthest_point_sampling(pts, 6)
    with pytest.raises(ValueError):
        farthest_point_sampling(pts, 0)


def test_fps_ties_go_to_lowest_index():
    # four corners of a square, seed at the centre: all equidistant
    pts = np.array([[0, 0, 0], [1, 1, 0], [-1, 1, 0], [1, -1, 0], [-1, -1, 0]], dtype=float)
    g = farthest_point_sampling(pts, 2)
    assert list(g.center_indices) == [0, 1]


@given(st.integers(0, 2**32 - 1), st.integers(2, 40))
@settings(max_examples=30, deadline=None)
def test_fps_min_distance_non_increasing(seed, m):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(60, 3))
    g = farthest_point_sampling(pts, m)
    seq = []
    for k in range(1, m):
        prev = pts[g.center_indices[:k]]
        seq.append(np.min(np.linalg.norm(prev - pts[g.center_indices[k]], axis=1)))
    assert all(b <= a + 1e-12 for a, b in zip(seq, seq[1:]))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_fps_permutation_independent(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(80, 3))
    perm = rng.permutation(80)
    a = farthest_point_sampling(pts, 10, seed_index=0)
    b = farthest_point_sampling(pts[perm], 10, seed_index=int(np.flatnonzero(perm == 0)[0]))
    assert np.array_equal(perm[b.center_indices], a.center_indices)


def test_groups_non_empty_and_centres_owned(rng):
    pts = rng.uniform(-20, 20, size=(2000, 3))
    g = farthest_point_sampling(pts, 64)
    assert len(set(g.center_indices.tolist())) == 64
    assert np.array_equal(np.bincount(g.assignment, minlength=64) > 0, np.ones(64, bool))
    assert np.array_equal(g.assignment[g.center_indices], np.arange(64))


def test_assignment_matches_brute_force_on_lattice():
    # lattice points produce many exact ties
    ax = np.arange(-3.0, 4.0)
    pts = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
    centers = np.array([[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, 2], [0, 0, -2]], dtype=float)
    assert np.array_equal(assign_to_centers(pts, centers), brute_force_assignment(pts, centers))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_assignment_matches_brute_force_random(seed):
    rng = np.random.default_rng(seed)
    pts = np.round(rng.normal(size=(300, 3)), 1)
    centers = np.round(rng.normal(size=(int(rng.integers(1, 20)), 3)), 1)
    assert np.array_equal(assign_to_centers(pts, centers), brute_force_assignment(pts, centers))


def test_patch_of_pixel_cases():
    grid = PatchGrid.for_image(288, 512, 16)
    assert grid.num_patches == 576 and (grid.rows, grid.cols) == (18, 32)
    assert patch_of_pixel(grid, (0, 0)) == (0, 0)
    assert patch_of_pixel(grid, (15.9, 15.9)) == (0, 0)
    assert patch_of_pixel(grid, (16.0, 0)) == (0, 1)
    with pytest.raises(ValueError):
        patch_of_pixel(grid, (512.0, 0))
    with pytest.raises(ValueError):
        patch_of_pixel(grid, (-0.1, 0))


def test_patch_grid_rejects_non_divisible():
    with pytest.raises(ValueError):
        PatchGrid.for_image(290, 512, 16)


def test_vectorised_patch_lookup_matches_scalar(rng):
    grid = PatchGrid.for_image(288, 512, 16)
    px = rng.uniform([0, 0], [512, 288], size=(500, 2))
    vec = patches_of_pixels(grid, px)
    assert all(tuple(vec[i]) == patch_of_pixel(grid, px[i]) for i in range(len(px)))


def test_centre_pixels_fall_in_their_patch():
    grid = PatchGrid.for_image(288, 512, 16)
    assert np.array_equal(patches_of_pixels(grid, grid.center_pixels()), grid.coords())
