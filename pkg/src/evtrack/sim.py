"""Event-camera simulator driven by a photometric map and a camera trajectory.

Log intensity is rendered at a fixed step; a pixel fires whenever its log
intensity moves a (possibly noisy) threshold away from the level of its last
event, with the timestamp interpolated linearly to the crossing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import CubicSpline

from . import _nbgeom as nb
from .errors import DegenerateInterval, InsufficientOverlap
from .photomap import PhotometricMap
from .se3 import CameraIntrinsics, Pose, quat_to_matrix

MIN_OVERLAP = 0.5
THRESHOLD_FLOOR = 0.1  # noisy thresholds never drop below this fraction of nominal


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    t: float
    p: int


@dataclass(eq=False)
class EventArray:
    """Column store of events in time order; iterates as :class:`Event`."""

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    outlier: np.ndarray | None = None
    increment: np.ndarray | None = None  # local per-step log-intensity change, see simulate()

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int32)
        self.y = np.asarray(self.y, dtype=np.int32)
        self.t = np.asarray(self.t, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.int8)

    @classmethod
    def empty(cls) -> EventArray:
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0))

    @classmethod
    def from_events(cls, events) -> EventArray:
        events = list(events)
        return cls(
            [e.x for e in events], [e.y for e in events], [e.t for e in events], [e.p for e in events]
        )

    def __len__(self):
        return len(self.t)

    def __getitem__(self, k):
        if isinstance(k, (int, np.integer)):
            return Event(int(self.x[k]), int(self.y[k]), float(self.t[k]), int(self.p[k]))
        sub = lambda a: None if a is None else a[k]  # noqa: E731
        return EventArray(self.x[k], self.y[k], self.t[k], self.p[k], sub(self.outlier), sub(self.increment))

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    def same_stream(self, other: EventArray) -> bool:
        return (
            np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.p, other.p)
        )


@dataclass(frozen=True)
class SimParams:
    camera: CameraIntrinsics
    C_plus: float = 0.15
    C_minus: float = -0.15
    threshold_noise_std: float = 0.0
    outlier_rate: float = 0.0  # events/s over the whole array
    render_dt: float = 1e-3
    rng_seed: int = 0
    depth_iters: int = 3

    def __post_init__(self):
        if not self.C_plus > 0:
            raise ValueError("C_plus must be positive")
        if not self.C_minus < 0:
            raise ValueError("C_minus must be negative")
        if not self.render_dt > 0:
            raise ValueError("render_dt must be positive")
        if self.threshold_noise_std < 0 or self.outlier_rate < 0:
            raise ValueError("noise std and outlier rate must be non-negative")


class TimestampMap:
    """Per-pixel time of the last event and log-intensity level at that event."""

    def __init__(self, width: int, height: int):
        self.last_t = np.full((height, width), -np.inf)
        self.ref_level = np.full((height, width), np.nan)

    def has_event(self, x, y) -> bool:
        return bool(np.isfinite(self.last_t[y, x]))

    def record(self, x, y, t, level=np.nan):
        if t < self.last_t[y, x]:
            raise ValueError("timestamps must be non-decreasing per pixel")
        self.last_t[y, x] = t
        self.ref_level[y, x] = level

    def copy(self) -> TimestampMap:
        out = TimestampMap.__new__(TimestampMap)
        out.last_t = self.last_t.copy()
        out.ref_level = self.ref_level.copy()
        return out


# --- trajectories -------------------------------------------------------------------


class Trajectory:
    """Timestamped pose samples; iterates as ``(t, Pose)``."""

    def __init__(self, times, quats, trans):
        self.times = np.asarray(times, dtype=float)
        self.quats = np.asarray(quats, dtype=float).reshape(-1, 4)
        self.trans = np.asarray(trans, dtype=float).reshape(-1, 3)
        if len(self.times) != len(self.quats) or len(self.times) != len(self.trans):
            raise ValueError("times, quats and trans must have equal length")

    @classmethod
    def from_poses(cls, samples) -> Trajectory:
        samples = list(samples)
        return cls(
            [t for t, _ in samples], [p.quat for _, p in samples], [p.translation for _, p in samples]
        )

    def __len__(self):
        return len(self.times)

    def __getitem__(self, k):
        return float(self.times[k]), Pose(self.quats[k], self.trans[k])

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    def pose_at(self, t: float) -> Pose:
        q, tr = self._interp(t)
        return Pose(np.array(q), np.array(tr))

    def _interp(self, t):
        ts = self.times
        if len(ts) == 1 or t <= ts[0]:
            return tuple(self.quats[0]), tuple(self.trans[0])
        if t >= ts[-1]:
            return tuple(self.quats[-1]), tuple(self.trans[-1])
        k = int(np.searchsorted(ts, t, side="right")) - 1
        a = (t - ts[k]) / (ts[k + 1] - ts[k])
        return nb.interp_pose(
            tuple(self.quats[k]), tuple(self.trans[k]), tuple(self.quats[k + 1]), tuple(self.trans[k + 1]), a
        )

    def sample(self, times) -> Trajectory:
        qs, ts = [], []
        for t in times:
            q, tr = self._interp(float(t))
            qs.append(q)
            ts.append(tr)
        return Trajectory(np.asarray(times, dtype=float), qs, ts)


def _offset_pose(base: Pose, d_trans, d_rot) -> Pose:
    """``base`` moved by ``d_trans`` (base camera frame) and rotated by ``d_rot`` (body frame)."""
    q = nb.qnormalize(nb.qmul(tuple(base.quat), nb.qexp(tuple(float(v) for v in d_rot))))
    return Pose(np.array(q), base.translation + base.rotation @ np.asarray(d_trans, dtype=float))


@dataclass
class ShakeMotion:
    """Hand-held style 6-DOF oscillation: two sinusoids per axis with random phases."""

    base: Pose = field(default_factory=Pose.identity)
    trans_amplitude: float = 0.03  # m, per axis
    rot_amplitude: float = math.radians(4.0)  # rad, per axis
    frequency: float = 0.5  # Hz
    seed: int = 0

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self._freq = self.frequency * np.array([1.0, 1.9]) * rng.uniform(0.8, 1.25, size=(6, 1))
        self._phase = rng.uniform(0, 2 * np.pi, size=(6, 2))
        self._weight = np.array([0.7, 0.3])

    def offsets(self, t: float):
        s = np.sin(2 * np.pi * self._freq * t + self._phase) @ self._weight
        return self.trans_amplitude * s[:3], self.rot_amplitude * s[3:]

    def pose(self, t: float) -> Pose:
        dt, dr = self.offsets(t)
        return _offset_pose(self.base, dt, dr)

    @property
    def angular_speed_bound(self) -> float:
        """Upper bound on the body angular speed (rad/s)."""
        per_axis = self.rot_amplitude * (2 * np.pi * self._freq[3:] @ self._weight)
        return float(np.linalg.norm(per_axis))


@dataclass
class OrbitMotion:
    """Circle parallel to the image plane while looking at a fixed target point."""

    base: Pose = field(default_factory=Pose.identity)
    radius: float = 0.05
    period: float = 2.0
    target_depth: float = 0.6

    def pose(self, t: float) -> Pose:
        a = 2 * np.pi * t / self.period
        p = np.array([self.radius * np.cos(a), self.radius * np.sin(a), 0.0])
        d = np.array([0.0, 0.0, self.target_depth]) - p
        d /= np.linalg.norm(d)
        axis = np.cross([0.0, 0.0, 1.0], d)
        s = np.linalg.norm(axis)
        rot = np.zeros(3) if s == 0 else axis / s * math.atan2(s, d[2])
        return _offset_pose(self.base, p, rot)


@dataclass
class SplineMotion:
    """Cubic spline through random control offsets, starting at the base pose."""

    base: Pose = field(default_factory=Pose.identity)
    trans_amplitude: float = 0.03
    rot_amplitude: float = math.radians(4.0)
    knot_dt: float = 0.5
    duration: float = 2.0
    seed: int = 0

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        n = int(np.ceil(self.duration / self.knot_dt)) + 1
        knots = np.arange(n) * self.knot_dt
        ctrl = rng.standard_normal((n, 6))
        ctrl[0] = 0.0
        ctrl[:, :3] *= self.trans_amplitude
        ctrl[:, 3:] *= self.rot_amplitude
        self._spline = CubicSpline(knots, ctrl, axis=0, bc_type="clamped")

    def pose(self, t: float) -> Pose:
        v = self._spline(t)
        return _offset_pose(self.base, v[:3], v[3:])


def make_motion(kind: str, **params):
    kinds = {"shake": ShakeMotion, "orbit": OrbitMotion, "spline": SplineMotion}
    if kind not in kinds:
        raise ValueError(f"unknown trajectory kind {kind!r}; choose from {sorted(kinds)}")
    return kinds[kind](**params)


def make_trajectory(kind: str, duration: float, dt: float = 1e-3, t0: float = 0.0, **params) -> Trajectory:
    """Sample a generated motion every ``dt`` seconds over ``[t0, t0 + duration]``."""
    if kind == "spline":
        params.setdefault("duration", duration)
    motion = make_motion(kind, **params)
    n = int(round(duration / dt)) + 1
    times = t0 + np.arange(n) * dt
    poses = [motion.pose(t - t0) for t in times]
    return Trajectory(times, [p.quat for p in poses], [p.translation for p in poses])


# --- rendering and simulation --------------------------------------------------------


def _render(pose: Pose, pmap: PhotometricMap, camera: CameraIntrinsics, depth_iters: int, out=None):
    if out is None:
        out = np.empty((camera.height, camera.width))
    logI, depth, kf_R, kf_t, kf_intr, kf_pose = pmap.packed()
    q, t = pose.as_tuples()
    good = nb.render(q, t, camera.as_array(), camera.width, camera.height, logI, depth, kf_R, kf_t,
                     kf_intr, kf_pose, pmap.mean_scene_depth, depth_iters, out)
    return out, good


def render_log_intensity(camera_pose: Pose, pmap: PhotometricMap, camera: CameraIntrinsics,
                         depth_iters: int = 3) -> np.ndarray:
    """Log-intensity image seen from ``camera_pose``; NaN marks unresolvable pixels."""
    img, good = _render(camera_pose, pmap, camera, depth_iters)
    if good < MIN_OVERLAP * img.size:
        raise InsufficientOverlap(f"only {good}/{img.size} pixels resolvable")
    return img


def _draw_thresholds(rng, nominal, std, n):
    if std == 0.0:
        return np.full(n, nominal)
    thr = nominal + std * rng.standard_normal(n)
    if nominal > 0:
        return np.maximum(thr, THRESHOLD_FLOOR * nominal)
    return np.minimum(thr, THRESHOLD_FLOOR * nominal)


def simulate(trajectory: Trajectory, pmap: PhotometricMap, params: SimParams) -> EventArray:
    """Generate the time-ordered event stream for ``trajectory``.

    The result carries an ``outlier`` mask and, for genuine events, the local
    per-step increment: the largest absolute log-intensity change at the pixel
    over the render step that produced the event and its two neighbours. It
    bounds the timing error of linear crossing interpolation, including steps
    where the signal turns or crosses a texture kink.
    """
    if len(trajectory) < 2 or np.any(np.diff(trajectory.times) <= 0):
        raise DegenerateInterval("trajectory needs >= 2 strictly increasing samples")
    cam = params.camera
    t0, t1 = float(trajectory.times[0]), float(trajectory.times[-1])
    n_steps = int(np.ceil((t1 - t0) / params.render_dt - 1e-9))
    step_times = np.minimum(t0 + np.arange(n_steps + 1) * params.render_dt, t1)

    noise_ss, outlier_ss = np.random.SeedSequence(params.rng_seed).spawn(2)
    rng = np.random.default_rng(noise_ss)
    std = params.threshold_noise_std
    npix = cam.width * cam.height

    L_old = _render(trajectory.pose_at(t0), pmap, cam, params.depth_iters)[0].ravel().copy()
    has_ref = np.isfinite(L_old)
    ref = np.where(has_ref, L_old, np.nan)
    thr_on = _draw_thresholds(rng, params.C_plus, std, npix)
    thr_off = _draw_thresholds(rng, params.C_minus, std, npix)

    chunks = []
    buf = np.empty((cam.height, cam.width))
    prev_step = np.zeros(npix)  # |dL| of the previous render step
    pending = []  # chunks of the previous step, still missing the following step's |dL|
    for n in range(1, len(step_times)):
        ta, tb = step_times[n - 1], step_times[n]
        L_new = _render(trajectory.pose_at(tb), pmap, cam, params.depth_iters, buf)[0].ravel()
        valid = np.isfinite(L_new)
        active = has_ref & valid
        # pixels that lost the scene forget their reference; returning ones restart silently
        lost = has_ref & ~valid
        ref[lost] = np.nan
        fresh = valid & ~has_ref
        ref[fresh] = L_new[fresh]
        has_ref = valid
        slope = L_new - L_old
        step_abs = np.abs(np.where(np.isfinite(slope), slope, 0.0))
        for c in pending:
            np.maximum(c[3], step_abs[c[0]], out=c[3])
        pending = []
        local = np.maximum(step_abs, prev_step)
        for pol in (1, -1):
            thr = thr_on if pol > 0 else thr_off
            idx = np.flatnonzero(active & (pol * (L_new - ref) >= pol * thr))
            while idx.size:
                level = ref[idx] + thr[idx]
                frac = np.clip((level - L_old[idx]) / slope[idx], 0.0, 1.0)
                t_ev = np.round((ta + frac * (tb - ta)) * 1e6) / 1e6
                chunks.append((idx, t_ev, pol, local[idx].copy()))
                pending.append(chunks[-1])
                ref[idx] = level
                thr[idx] = _draw_thresholds(rng, params.C_plus if pol > 0 else params.C_minus, std, idx.size)
                keep = pol * (L_new[idx] - ref[idx]) >= pol * thr[idx]
                idx = idx[keep]
        L_old = L_new.copy()
        prev_step = step_abs

    if chunks:
        pix = np.concatenate([c[0] for c in chunks])
        t = np.concatenate([c[1] for c in chunks])
        p = np.concatenate([np.full(c[0].size, c[2], dtype=np.int8) for c in chunks])
        inc = np.concatenate([c[3] for c in chunks])
    else:
        pix = np.zeros(0, dtype=np.int64)
        t = np.zeros(0)
        p = np.zeros(0, dtype=np.int8)
        inc = np.zeros(0)
    x, y = pix % cam.width, pix // cam.width
    events = EventArray(x, y, t, p, np.zeros(len(t), dtype=bool), inc)
    return add_outliers(events, params.outlier_rate, cam, t0, t1, outlier_ss)


def add_outliers(events: EventArray, rate: float, camera: CameraIntrinsics, t0: float, t1: float,
                 seed) -> EventArray:
    """Merge Poisson(rate * (t1 - t0)) uniform outlier events into ``events`` (stable time order)."""
    x, y, t, p = events.x, events.y, events.t, events.p
    outlier = np.zeros(len(t), dtype=bool) if events.outlier is None else events.outlier
    inc = np.full(len(t), np.nan) if events.increment is None else events.increment
    if rate > 0:
        orng = np.random.default_rng(seed)
        k = orng.poisson(rate * (t1 - t0))
        ot = np.round(orng.uniform(t0, t1, k) * 1e6) / 1e6
        ox = orng.integers(0, camera.width, k)
        oy = orng.integers(0, camera.height, k)
        op = np.where(orng.integers(0, 2, k) == 1, 1, -1).astype(np.int8)
        x = np.concatenate([x, ox])
        y = np.concatenate([y, oy])
        t = np.concatenate([t, ot])
        p = np.concatenate([p, op])
        inc = np.concatenate([inc, np.full(k, np.nan)])
        outlier = np.concatenate([outlier, np.ones(k, dtype=bool)])
    order = np.argsort(t, kind="stable")
    return EventArray(x[order], y[order], t[order], p[order], outlier[order], inc[order])


def outlier_seed(params: SimParams):
    """Seed of the outlier stream used by :func:`simulate` for ``params``."""
    return np.random.SeedSequence(params.rng_seed).spawn(2)[1]


def rate_for_fraction(n_genuine: int, duration: float, fraction: float) -> float:
    """Outlier rate (events/s) that makes ``fraction`` of the merged stream outliers on average."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("outlier fraction must lie in [0, 1)")
    return fraction / (1.0 - fraction) * n_genuine / duration


def with_params(params: SimParams, **changes) -> SimParams:
    return replace(params, **changes)


def rotation_speeds(traj: Trajectory) -> np.ndarray:
    """Finite-difference body angular speed (rad/s) between consecutive samples."""
    out = np.empty(len(traj) - 1)
    for k in range(len(traj) - 1):
        R0 = quat_to_matrix(traj.quats[k])
        R1 = quat_to_matrix(traj.quats[k + 1])
        c = (np.trace(R0.T @ R1) - 1.0) / 2.0
        out[k] = math.acos(min(1.0, max(-1.0, c))) / (traj.times[k + 1] - traj.times[k])
    return out
