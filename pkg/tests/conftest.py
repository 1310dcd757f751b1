import numpy as np
import pytest

from perspective3d.box3d import Box3D, keypoints
from perspective3d.camera import Camera, CameraExtrinsics, CameraIntrinsics, project_point
from perspective3d.perspective import RoI


def make_camera(tilt=0.0, roll=0.0, cam_height=1.5, fx=500.0, fy=500.0, cx=320.0, cy=240.0):
    return Camera(CameraIntrinsics(fx, fy, cx, cy, 2 * cx, 2 * cy), CameraExtrinsics(tilt, roll, cam_height))


def random_camera(rng, tilt=(-0.3, 0.3), roll=(-0.1, 0.1)):
    return make_camera(rng.uniform(*tilt), rng.uniform(*roll), rng.uniform(1.0, 1.8))


def random_box(rng, cam, on_floor=True, distance=(2.5, 7.0)):
    """Box in front of ``cam`` whose keypoints all project."""
    while True:
        size = rng.uniform(0.3, 2.0, 3)
        r, az = rng.uniform(*distance), rng.uniform(-0.4, 0.4)
        y = cam.extrinsics.cam_height - size[2] / 2 if on_floor else rng.uniform(-0.5, 1.0)
        box = Box3D([r * np.sin(az), y, r * np.cos(az)], size, rng.uniform(-np.pi, np.pi))
        try:
            project_point(keypoints(box), cam)
        except Exception:
            continue
        return box


def roi_for(box, cam):
    return RoI.from_points(project_point(keypoints(box), cam))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def cam():
    return make_camera()


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
