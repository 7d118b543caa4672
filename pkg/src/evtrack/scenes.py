"""Bundled synthetic scenes: a textured plane and a two-plane "boxes" layout."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .photomap import PhotometricMap, ReferenceKeyframe
from .se3 import CameraIntrinsics, Pose

SCENES = ("planar_rocks", "boxes")

# 128x128 event sensor, ~60 degree field of view
SENSOR = CameraIntrinsics(fx=110.0, fy=110.0, cx=63.5, cy=63.5, width=128, height=128)
# wider 256x256 reference view so the sensor stays inside the map while moving
REFERENCE = CameraIntrinsics(fx=100.0, fy=100.0, cx=127.5, cy=127.5, width=256, height=256)


def rocks_texture(shape, seed, contrast=0.6) -> np.ndarray:
    """Band-limited random log-intensity pattern with blob sizes of a few pixels."""
    rng = np.random.default_rng(seed)
    L = np.zeros(shape)
    for sigma, weight in ((1.5, 1.0), (3.0, 0.8), (8.0, 0.6)):
        layer = gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
        L += weight * layer / layer.std()
    return contrast * L / L.std()


def _to_pgm16(log_intensity: np.ndarray) -> np.ndarray:
    lin = np.exp(log_intensity - log_intensity.max())
    return np.clip(np.round(lin * 65535.0), 1, 65535).astype(np.uint16)


def _plane_depth(cam: CameraIntrinsics, normal, distance) -> np.ndarray:
    """Depth map of the plane ``normal . X = distance`` seen by ``cam`` at the origin."""
    ys, xs = np.mgrid[0 : cam.height, 0 : cam.width].astype(float)
    ux = (xs - cam.cx) / cam.fx
    uy = (ys - cam.cy) / cam.fy
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    return distance / (n[0] * ux + n[1] * uy + n[2])


def planar_rocks(seed: int = 7, depth: float = 0.6) -> PhotometricMap:
    """Textured, slightly tilted plane at ``depth`` meters."""
    cam = REFERENCE
    L = rocks_texture((cam.height, cam.width), seed)
    Z = _plane_depth(cam, (0.08, -0.05, 1.0), depth)
    kf = ReferenceKeyframe(_to_pgm16(L), Z.astype(np.float32), Pose.identity(), cam)
    return PhotometricMap([kf])


def boxes(seed: int = 11, far: float = 1.6, ratio: float = 2.0) -> PhotometricMap:
    """Background plane with a box face in front at ``far / ratio`` (depth discontinuity)."""
    cam = REFERENCE
    L = rocks_texture((cam.height, cam.width), seed)
    Z = _plane_depth(cam, (0.0, 0.0, 1.0), far)
    near = _plane_depth(cam, (0.05, 0.02, 1.0), far / ratio)
    box = np.zeros(Z.shape, dtype=bool)
    box[70:170, 60:150] = True
    Z[box] = near[box]
    kf = ReferenceKeyframe(_to_pgm16(L), Z.astype(np.float32), Pose.identity(), cam)
    return PhotometricMap([kf])


def make_scene(name: str, seed: int | None = None) -> PhotometricMap:
    if name == "planar_rocks":
        return planar_rocks() if seed is None else planar_rocks(seed)
    if name == "boxes":
        return boxes() if seed is None else boxes(seed)
    raise ValueError(f"unknown scene {name!r}; choose from {SCENES}")
