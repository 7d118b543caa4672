"""Photometric depth map: reference log-intensity images with depth and pose.

On disk a map directory holds, per keyframe ``<id>``, an intensity image
``<id>.pgm`` (binary P5, 8 or 16 bit) and a depth map ``<id>.pfm`` (``Pf``,
little-endian, meters; values <= 0 or non-finite are holes), plus two text
files: ``poses.txt`` with ``id tx ty tz qx qy qz qw`` lines (world-from-camera)
and ``intrinsics.txt`` with ``id fx fy cx cy`` lines.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _nbgeom as nb
from .errors import DimensionMismatch, InvalidDepth, OutOfBounds, ParseError
from .se3 import CameraIntrinsics, Pose

INTENSITY_FLOOR = 1e-3  # fraction of the image maximum


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Read a binary (P5) PGM; returns the raw integer image and its maxval."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    # header: magic, width, height, maxval; '#' comments allowed between tokens
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*([^\s#]+)").match(data, pos)
        if m is None:
            raise ParseError("truncated PGM header", path)
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P5":
        raise ParseError(f"not a binary PGM (magic {tokens[0]!r})", path)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ParseError(f"bad PGM header: {exc}", path) from None
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise ParseError("bad PGM dimensions or maxval", path)
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = width * height * dtype.itemsize
    if len(data) - pos < n:
        raise ParseError("truncated PGM raster", path)
    img = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    return img.reshape(height, width).astype(np.uint16 if maxval > 255 else np.uint8), maxval


def write_pgm(path, img: np.ndarray, maxval: int | None = None):
    img = np.asarray(img)
    if maxval is None:
        maxval = 65535 if img.dtype == np.uint16 else 255
    h, w = img.shape
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        f.write(img.astype(dtype).tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a single-channel PFM as float32, top row first."""
    with open(path, "rb") as f:
        try:
            tag = f.readline().decode("ascii").strip()
            dims = f.readline().decode("ascii").split()
            scale = float(f.readline().decode("ascii").strip())
            width, height = int(dims[0]), int(dims[1])
        except (UnicodeDecodeError, ValueError, IndexError):
            raise ParseError("bad PFM header", path) from None
        if tag != "Pf":
            raise ParseError(f"expected single-channel 'Pf' PFM, got {tag!r}", path)
        dtype = "<f4" if scale < 0 else ">f4"
        buf = f.read()
    if len(buf) < 4 * width * height:
        raise ParseError("truncated PFM raster", path)
    img = np.frombuffer(buf, dtype=dtype, count=width * height).reshape(height, width)
    return np.flipud(img).astype(np.float32)


def write_pfm(path, img: np.ndarray):
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode())
        f.write(np.flipud(img).astype("<f4").tobytes())


def log_from_intensity(intensity: np.ndarray) -> np.ndarray:
    """Natural log of intensity, floored at INTENSITY_FLOOR times the image maximum."""
    lin = np.asarray(intensity, dtype=np.float64)
    floor = INTENSITY_FLOOR * max(float(lin.max()), np.finfo(float).tiny)
    return np.log(np.maximum(lin, floor))


@dataclass(eq=False)
class ReferenceKeyframe:
    intensity: np.ndarray  # raw PGM samples, kept for lossless re-saving
    depth: np.ndarray  # float32 meters; <= 0 or non-finite marks a hole
    pose: Pose
    intrinsics: CameraIntrinsics
    maxval: int = 65535
    log_intensity: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.intensity.shape != self.depth.shape:
            raise DimensionMismatch(
                f"intensity {self.intensity.shape} and depth {self.depth.shape} differ"
            )
        h, w = self.intensity.shape
        if (self.intrinsics.width, self.intrinsics.height) != (w, h):
            raise DimensionMismatch(
                f"intrinsics size {self.intrinsics.width}x{self.intrinsics.height} != image {w}x{h}"
            )
        self.depth = np.asarray(self.depth, dtype=np.float32)
        self.log_intensity = log_from_intensity(self.intensity)

    @property
    def valid_depth(self) -> np.ndarray:
        return np.isfinite(self.depth) & (self.depth > 0)


class PhotometricMap:
    def __init__(self, keyframes: list[ReferenceKeyframe]):
        if not keyframes:
            raise ValueError("a map needs at least one keyframe")
        shape = keyframes[0].intensity.shape
        for kf in keyframes[1:]:
            if kf.intensity.shape != shape:
                raise DimensionMismatch("all keyframes must share one image size")
        self.keyframes = list(keyframes)
        valid = keyframes[0].valid_depth
        if not valid.any():
            raise ValueError("first keyframe has no valid depth")
        self.mean_scene_depth = float(np.mean(keyframes[0].depth[valid], dtype=np.float64))
        self._packed = None

    def __len__(self):
        return len(self.keyframes)

    def packed(self):
        """Arrays consumed by the numba kernels (built once, read-only)."""
        if self._packed is None:
            kfs = self.keyframes
            logI = np.ascontiguousarray(np.stack([k.log_intensity for k in kfs]))
            depth = np.ascontiguousarray(np.stack([k.depth.astype(np.float64) for k in kfs]))
            kf_R = np.empty((len(kfs), 9))
            kf_t = np.empty((len(kfs), 3))
            kf_pose = np.empty((len(kfs), 7))
            for n, k in enumerate(kfs):
                R_wr = k.pose.rotation
                kf_R[n] = R_wr.T.ravel()
                kf_t[n] = -(R_wr.T @ k.pose.translation)
                kf_pose[n, :4] = k.pose.quat
                kf_pose[n, 4:] = k.pose.translation
            kf_intr = np.stack([k.intrinsics.as_array() for k in kfs])
            for a in (logI, depth, kf_R, kf_t, kf_pose, kf_intr):
                a.flags.writeable = False
            self._packed = (logI, depth, kf_R, kf_t, kf_intr, kf_pose)
        return self._packed

    def kernel_args(self, kf: int):
        """Per-keyframe tuple ``(logI, depth, R_rw, t_rw, intr)`` for single-keyframe kernels."""
        logI, depth, kf_R, kf_t, kf_intr, _ = self.packed()
        return logI[kf], depth[kf], tuple(kf_R[kf]), tuple(kf_t[kf]), kf_intr[kf]


def sample_log_intensity(pmap: PhotometricMap, kf: int, u) -> float:
    """Bilinear log intensity at pixel coordinates ``u = (x, y)`` of keyframe ``kf``."""
    st, v = nb.sample_bilinear(pmap.packed()[0][kf], float(u[0]), float(u[1]))
    if st != nb.OK:
        raise OutOfBounds(f"pixel {tuple(u)} outside the sampleable region")
    return v


def sample_depth(pmap: PhotometricMap, kf: int, u) -> float:
    st, v = nb.sample_depth_bilinear(pmap.packed()[1][kf], float(u[0]), float(u[1]))
    if st == nb.OUT_OF_BOUNDS:
        raise OutOfBounds(f"pixel {tuple(u)} outside the sampleable region")
    if st == nb.INVALID_DEPTH:
        raise InvalidDepth(f"depth hole next to pixel {tuple(u)}")
    return v


def select_reference(pmap: PhotometricMap, camera_pose: Pose) -> int:
    q, t = camera_pose.as_tuples()
    return int(nb.select_keyframe(q, t, pmap.packed()[5], pmap.mean_scene_depth))


def _read_table(path, ncols):
    rows = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != ncols:
            raise ParseError(f"expected {ncols} fields, got {len(parts)}", path, lineno)
        try:
            rows[parts[0]] = [float(v) for v in parts[1:]]
        except ValueError:
            raise ParseError("non-numeric field", path, lineno) from None
    return rows


def load_map(intensity_files, depth_files, pose_file, intrinsics_file) -> PhotometricMap:
    """Load keyframes; ids are the file stems of the intensity images."""
    intensity_files = [Path(p) for p in intensity_files]
    depth_files = [Path(p) for p in depth_files]
    if len(intensity_files) != len(depth_files):
        raise DimensionMismatch("need one depth map per intensity image")
    poses = _read_table(pose_file, 8)
    intr = _read_table(intrinsics_file, 5)
    keyframes = []
    for ip, dp in zip(intensity_files, depth_files):
        kid = ip.stem
        if kid not in poses or kid not in intr:
            raise ParseError(f"keyframe {kid!r} missing from pose or intrinsics file", pose_file)
        img, maxval = read_pgm(ip)
        depth = read_pfm(dp)
        if depth.shape != img.shape:
            raise DimensionMismatch(f"{dp}: depth {depth.shape} vs intensity {img.shape}")
        p = poses[kid]
        q = np.array(p[3:7])
        if abs(np.linalg.norm(q) - 1.0) > 1e-3:
            raise ParseError(f"keyframe {kid!r} quaternion is not unit norm", pose_file)
        fx, fy, cx, cy = intr[kid]
        cam = CameraIntrinsics(fx, fy, cx, cy, img.shape[1], img.shape[0])
        keyframes.append(ReferenceKeyframe(img, depth, Pose(q, p[:3]), cam, maxval))
    return PhotometricMap(keyframes)


def load_map_dir(path) -> PhotometricMap:
    path = Path(path)
    pgms = sorted(path.glob("*.pgm"))
    if not pgms:
        raise ParseError("no .pgm keyframes found", path)
    return load_map(pgms, [p.with_suffix(".pfm") for p in pgms], path / "poses.txt", path / "intrinsics.txt")


def save_map_dir(pmap: PhotometricMap, path, ids=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    ids = ids or [f"kf{n:03d}" for n in range(len(pmap))]
    pose_lines, intr_lines = [], []
    for kid, kf in zip(ids, pmap.keyframes):
        write_pgm(path / f"{kid}.pgm", kf.intensity, kf.maxval)
        write_pfm(path / f"{kid}.pfm", kf.depth)
        t, q = kf.pose.translation, kf.pose.quat
        pose_lines.append(f"{kid} " + " ".join(repr(float(v)) for v in (*t, *q)))
        c = kf.intrinsics
        intr_lines.append(f"{kid} {c.fx!r} {c.fy!r} {c.cx!r} {c.cy!r}")
    (path / "poses.txt").write_text("\n".join(pose_lines) + "\n")
    (path / "intrinsics.txt").write_text("\n".join(intr_lines) + "\n")
