from __future__ import annotations

import numpy as np
import pytest

from evtrack.photomap import PhotometricMap, ReferenceKeyframe
from evtrack.scenes import SENSOR, make_scene
from evtrack.se3 import CameraIntrinsics, Pose
from evtrack.sim import SimParams, make_trajectory, simulate

SMALL = CameraIntrinsics(fx=40.0, fy=40.0, cx=23.5, cy=23.5, width=48, height=48)

# lines collected by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def custom_map(log_intensity, depth, pose=None, intrinsics=None) -> PhotometricMap:
    """Single-keyframe map with an exact (unquantized) log-intensity grid."""
    log_intensity = np.asarray(log_intensity, dtype=float)
    h, w = log_intensity.shape
    if intrinsics is None:
        intrinsics = CameraIntrinsics(100.0, 100.0, (w - 1) / 2, (h - 1) / 2, w, h)
    depth = np.broadcast_to(np.asarray(depth, dtype=np.float32), (h, w)).copy()
    kf = ReferenceKeyframe(np.ones((h, w), dtype=np.uint16), depth, pose or Pose.identity(), intrinsics)
    kf.log_intensity = log_intensity
    return PhotometricMap([kf])


def linear_map(gx=0.01, gy=0.0, depth=0.6, size=256, dzx=0.0, dzy=0.0) -> PhotometricMap:
    """Log intensity and depth both affine in reference pixel coordinates (bilinear-exact)."""
    ys, xs = np.mgrid[0:size, 0:size].astype(float)
    c = (size - 1) / 2
    return custom_map(gx * (xs - c) + gy * (ys - c), depth + dzx * (xs - c) + dzy * (ys - c))


@pytest.fixture(scope="session")
def rocks():
    return make_scene("planar_rocks")


@pytest.fixture(scope="session")
def boxes_map():
    return make_scene("boxes")


@pytest.fixture(scope="session")
def short_run(rocks):
    """Noise-free 0.25 s shake on the rocks plane: (trajectory, events, params)."""
    traj = make_trajectory("shake", 0.25, 1e-3, trans_amplitude=0.04, rot_amplitude=np.radians(4.0),
                           frequency=0.5, seed=1)
    params = SimParams(SENSOR, 0.15, -0.15, 0.0, 0.0, 1e-3, 5)
    return traj, simulate(traj, rocks, params), params
