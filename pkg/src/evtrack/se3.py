"""Rigid-body poses, pinhole projection, pose interpolation and rotation metrics.

Poses are world-from-camera transforms: ``p_world = R @ p_cam + t``. Rotations
are held as unit quaternions in (x, y, z, w) order with non-negative ``w``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _nbgeom as nb
from .errors import DegenerateInterval, NonPositiveDepth


def _as_tuple(a):
    return tuple(float(v) for v in a)


def quat_from_rotvec(v) -> np.ndarray:
    return np.array(nb.qexp(_as_tuple(v)))


def rotvec_from_quat(q) -> np.ndarray:
    return np.array(nb.qlog(_as_tuple(q)))


def quat_to_matrix(q) -> np.ndarray:
    return np.array(nb.qmatrix(_as_tuple(q))).reshape(3, 3)


def quat_from_matrix(R) -> np.ndarray:
    """Shepperd's method; robust for every rotation angle."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
    return np.array(nb.qnormalize(tuple(q)))


@dataclass(frozen=True, eq=False)
class Pose:
    quat: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("quaternion must be finite and non-zero")
        q = q / n
        if q[3] < 0:
            q = -q
        t = np.array(self.translation, dtype=float).reshape(3)
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> Pose:
        return cls(quat_from_rotvec(rotvec), translation)

    @classmethod
    def from_matrix(cls, T) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls(quat_from_matrix(T[:3, :3]), T[:3, 3])

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    @property
    def rotvec(self) -> np.ndarray:
        return rotvec_from_quat(self.quat)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def transform(self, p) -> np.ndarray:
        """Map camera-frame point(s) ``p`` (..., 3) to the world frame."""
        return np.asarray(p, dtype=float) @ self.rotation.T + self.translation

    def as_tuples(self):
        return _as_tuple(self.quat), _as_tuple(self.translation)

    def __matmul__(self, other: Pose) -> Pose:
        return compose(self, other)

    def __repr__(self):
        q = ", ".join(f"{v:.6g}" for v in self.quat)
        t = ", ".join(f"{v:.6g}" for v in self.translation)
        return f"Pose(quat=[{q}], translation=[{t}])"


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=float)

    def to_calibrated(self, px) -> np.ndarray:
        px = np.asarray(px, dtype=float)
        return np.stack([(px[..., 0] - self.cx) / self.fx, (px[..., 1] - self.cy) / self.fy], axis=-1)

    def to_pixel(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return np.stack([self.fx * u[..., 0] + self.cx, self.fy * u[..., 1] + self.cy], axis=-1)

    def scaled(self, factor: float) -> CameraIntrinsics:
        """Intrinsics of the same camera with the image resampled by ``factor``."""
        w = int(round(self.width * factor))
        h = int(round(self.height * factor))
        return CameraIntrinsics(
            self.fx * factor, self.fy * factor,
            (self.cx + 0.5) * factor - 0.5, (self.cy + 0.5) * factor - 0.5, w, h,
        )


def project(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if not p[2] > 0:
        raise NonPositiveDepth(f"point depth {p[2]} is not positive")
    return np.array([p[0] / p[2], p[1] / p[2]])


def backproject(u, Z: float) -> np.ndarray:
    if not Z > 0:
        raise NonPositiveDepth(f"depth {Z} is not positive")
    return np.array([u[0] * Z, u[1] * Z, float(Z)])


def compose(a: Pose, b: Pose) -> Pose:
    qa, ta = a.as_tuples()
    q = nb.qnormalize(nb.qmul(qa, _as_tuple(b.quat)))
    t = a.rotation @ b.translation + a.translation
    return Pose(np.array(q), t)


def inverse(a: Pose) -> Pose:
    qi = np.array(nb.qconj(_as_tuple(a.quat)))
    return Pose(qi, -(a.rotation.T @ a.translation))


def interpolate_pose(pose_i: Pose, t_i: float, pose_j: Pose, t_j: float, t: float) -> Pose:
    """Pose at time ``t`` between two samples.

    Translation is linear in time; rotation follows the geodesic of the
    relative rotation at constant angular velocity. Times outside
    ``[t_i, t_j]`` extrapolate along the same path.
    """
    if not t_j > t_i:
        raise DegenerateInterval(f"t_j={t_j} must exceed t_i={t_i}")
    if t == t_i:
        return pose_i
    if t == t_j:
        return pose_j
    alpha = (t - t_i) / (t_j - t_i)
    qi, ti = pose_i.as_tuples()
    qj, tj = pose_j.as_tuples()
    q, tr = nb.interp_pose(qi, ti, qj, tj, alpha)
    return Pose(np.array(q), np.array(tr))


def geodesic_angle(Ra, Rb) -> float:
    """Angle of ``Ra.T @ Rb`` in degrees. Accepts matrices, quaternions or Poses."""
    R = _rotation_matrix(Ra).T @ _rotation_matrix(Rb)
    c = min(1.0, max(-1.0, (np.trace(R) - 1.0) / 2.0))
    # sine from the skew part; atan2 keeps precision near 0 where acos does not
    s = 0.5 * math.sqrt((R[2, 1] - R[1, 2]) ** 2 + (R[0, 2] - R[2, 0]) ** 2 + (R[1, 0] - R[0, 1]) ** 2)
    return math.degrees(math.atan2(s, c))


def geodesic_angles(qa: np.ndarray, qb: np.ndarray) -> np.ndarray:
    """Vectorized geodesic angle in degrees between (N, 4) quaternion arrays."""
    qa = np.asarray(qa, dtype=float)
    qb = np.asarray(qb, dtype=float)
    # relative rotation conj(qa) * qb; atan2 keeps precision near zero
    w = np.sum(qa * qb, axis=-1)
    v = qa[..., 3:4] * qb[..., :3] - qb[..., 3:4] * qa[..., :3] - np.cross(qa[..., :3], qb[..., :3])
    return np.degrees(2.0 * np.arctan2(np.linalg.norm(v, axis=-1), np.abs(w)))


def _rotation_matrix(r) -> np.ndarray:
    if isinstance(r, Pose):
        return r.rotation
    r = np.asarray(r, dtype=float)
    if r.shape == (4,):
        return quat_to_matrix(r / np.linalg.norm(r))
    return r
