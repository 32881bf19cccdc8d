import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from i2preg.geom import CameraModel, Pose
from i2preg.grouping import PatchGrid, farthest_point_sampling
from i2preg.scenegen import PROTOCOL_CAMERA, generate_scene, partition_voxels, view_fractions


def random_pose(rng, max_translation=5.0) -> Pose:
    R = Rotation.random(random_state=rng).as_matrix()
    return Pose(R, rng.uniform(-max_translation, max_translation, 3))


def points_in_view(rng, cam: CameraModel, pose: Pose, n, depth=(4.0, 30.0)):
    """World points whose true projections fall inside the image."""
    u = rng.uniform(0, cam.width, n)
    v = rng.uniform(0, cam.height, n)
    z = rng.uniform(*depth, n)
    pc = np.stack([(u - cam.cx) / cam.fx * z, (v - cam.cy) / cam.fy * z, z], axis=1)
    return pose.inverse().apply(pc), np.stack([u, v], axis=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def protocol_camera():
    return PROTOCOL_CAMERA


@pytest.fixture
def small_camera():
    return CameraModel(320.0, 320.0, 256.0, 144.0, 512, 288)


@pytest.fixture(scope="session")
def scene0():
    return generate_scene(0)


@pytest.fixture(scope="session")
def oracle_setup(scene0):
    """20480 points of the voxel best seen by one test camera, grouped into 512."""
    rec = scene0.cameras[5]
    part = partition_voxels(scene0.cloud, scene0.region)
    frac = view_fractions(part, scene0.cloud, [rec])
    vox = part.voxels[int(np.argmax(frac[:, 0]))]
    ids = np.sort(np.random.default_rng(0).choice(vox.indices, 20480, replace=False))
    pts = scene0.cloud.points[ids]
    groups = farthest_point_sampling(pts, 512)
    grid = PatchGrid.for_image(288, 512, 16)
    return pts, rec.camera.resized(512, 288), rec.pose, groups, grid


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def report(request):
    """Record and print one PASS/FAIL line, then assert the verdict."""
    def _report(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        print(line)
        request.config.acceptance_lines.append(line)
        assert ok, line
    return _report
