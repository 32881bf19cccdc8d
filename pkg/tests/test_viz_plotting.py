import numpy as np

from i2preg.geom import Pose, project_points
from i2preg.io import read_pnm
from i2preg.plotting import error_cdf_figure, inlier_histogram, save_png
from i2preg.types import CorrespondenceSet
from i2preg.viz import GREEN, RED, classify, correspondence_image, depth_colors, depth_image


def test_depth_image_covers_every_visible_point(rng, small_camera):
    pts = rng.normal(size=(2000, 3)) * [10, 6, 4] + [0, 0, 20]
    rgb, depth = depth_image(small_camera, Pose.identity(), pts)
    uv, z, vis = project_points(small_camera, Pose.identity(), pts)
    cells = {(int(v), int(u)) for u, v in uv[vis]}
    assert np.count_nonzero(np.isfinite(depth)) == len(cells)
    assert all(np.any(rgb[r, c] > 0) for r, c in cells)
    # the z-buffer keeps the nearest point
    for (u, v), zz in zip(uv[vis], z[vis]):
        assert depth[int(v), int(u)] <= zz


def test_depth_colours_ramp():
    c = depth_colors([0.0, 10.0], 0.0, 10.0)
    assert c.dtype == np.uint8 and tuple(c[0]) == (255, 60, 30) and tuple(c[1]) == (40, 90, 220)


def test_correspondences_coloured_by_error(rng, small_camera):
    pts = rng.normal(size=(20, 3)) + [0, 0, 15]
    uv = project_points(small_camera, Pose.identity(), pts)[0]
    uv[:5] += 30.0
    corr = CorrespondenceSet(np.arange(20), pts, uv, np.ones(20))
    img, correct = correspondence_image(small_camera, Pose.identity(), corr, 4.0)
    assert list(correct) == [False] * 5 + [True] * 15
    assert np.array_equal(classify(small_camera, Pose.identity(), corr, 4.0), correct)
    u, v = np.rint(uv[10]).astype(int)
    assert np.array_equal(img[v, u], GREEN)
    u, v = np.rint(uv[0]).astype(int)
    assert np.array_equal(img[v, u], RED)


def test_png_output_is_deterministic(tmp_path, rng):
    rre, rte = rng.exponential(0.1, 50), rng.exponential(0.05, 50)
    for name in ("a.png", "b.png"):
        save_png(error_cdf_figure(rre, rte, 10.0, 5.0), tmp_path / name)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    save_png(inlier_histogram(rng.integers(0, 300, 40)), tmp_path / "h.png")
    assert (tmp_path / "h.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_pnm_written_by_viz_is_readable(tmp_path, small_camera, rng):
    from i2preg.io import write_ppm
    rgb, _ = depth_image(small_camera, Pose.identity(), rng.normal(size=(100, 3)) + [0, 0, 10])
    write_ppm(tmp_path / "d.ppm", rgb)
    assert np.array_equal(read_pnm(tmp_path / "d.ppm"), rgb)
