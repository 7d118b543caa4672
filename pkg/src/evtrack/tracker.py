"""Per-event robust Bayesian pose tracker.

The belief is a Gaussian over the 19 reduced-state coordinates (current pose,
the two history poses bracketing the previous event at the pixel, and the
contrast threshold) times a Beta belief on the inlier probability and an
inverse-gamma belief on the inlier residual variance. Each event runs:
diffusion prediction, binding of the bracketing history poses, and a Kalman
correction scaled by the event's inlier probability.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import _nbfilter as nbf
from . import _nbgeom as nb
from .errors import InsufficientOverlap, NoPriorPose
from .measurement import MixtureParams, ReducedState, linearize
from .photomap import PhotometricMap
from .se3 import CameraIntrinsics, Pose, rotvec_from_quat
from .sim import MIN_OVERLAP, EventArray, Trajectory, TimestampMap, _render

HISTORY_EPS = 1e-6


@dataclass(frozen=True)
class MotionModelParams:
    per_event_diffusion_std: float = 1e-4
    max_std: float = 0.03
    threshold_diffusion_std: float = 1e-5

    def __post_init__(self):
        if min(self.per_event_diffusion_std, self.threshold_diffusion_std) < 0 or not self.max_std > 0:
            raise ValueError("diffusion stds must be >= 0 and max_std > 0")


@dataclass(frozen=True)
class TrackerConfig:
    C0: float = 0.15
    initial_pose_std: float = 0.005
    initial_threshold_std: float = 0.005
    motion: MotionModelParams = field(default_factory=MotionModelParams)
    beta_a: float = 1.0
    beta_b: float = 1.0
    ig_alpha: float = 3.0
    ig_beta: float = 0.08
    M_min: float = -5.0
    M_max: float = 5.0
    C_min_floor: float = 1e-3
    fd_step: float = 1e-4
    depth_iters: int = 3
    history_capacity: int = 1024
    history_dt: float = 1e-3
    write_back: bool = True
    clamp_outside_support: bool = False
    pi_fixed: float | None = None
    sigma_fixed: float | None = None
    weight_innovation: bool = True  # inlier Gaussian uses J P J^T + sigma^2

    def __post_init__(self):
        checks = [
            (self.C0 > self.C_min_floor > 0, "need C0 > C_min_floor > 0"),
            (self.initial_pose_std >= 0 and self.initial_threshold_std >= 0, "initial stds must be >= 0"),
            (self.beta_a > 0 and self.beta_b > 0, "Beta prior counts must be positive"),
            (self.ig_alpha > 1 and self.ig_beta > 0, "need ig_alpha > 1 and ig_beta > 0"),
            (self.M_min < 0 < self.M_max, "need M_min < 0 < M_max"),
            (self.fd_step > 0 and self.depth_iters >= 1, "need fd_step > 0 and depth_iters >= 1"),
            (self.history_capacity >= 2 and self.history_dt >= 0, "need history_capacity >= 2, history_dt >= 0"),
            (self.pi_fixed is None or 0 <= self.pi_fixed <= 1, "pi_fixed must lie in [0, 1]"),
            (self.sigma_fixed is None or self.sigma_fixed > 0, "sigma_fixed must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    def kernel_config(self, scale: float) -> np.ndarray:
        cfg = np.zeros(nbf.CFG_SIZE)
        cfg[nbf.CFG_SCALE] = scale
        cfg[nbf.CFG_FD_STEP] = self.fd_step
        cfg[nbf.CFG_DEPTH_ITERS] = self.depth_iters
        cfg[nbf.CFG_POSE_DIFF_VAR] = self.motion.per_event_diffusion_std**2
        cfg[nbf.CFG_THR_DIFF_VAR] = self.motion.threshold_diffusion_std**2
        cfg[nbf.CFG_MAX_VAR] = self.motion.max_std**2
        cfg[nbf.CFG_M_MIN] = self.M_min
        cfg[nbf.CFG_M_MAX] = self.M_max
        cfg[nbf.CFG_C_FLOOR] = self.C_min_floor
        cfg[nbf.CFG_PI_FIXED] = np.nan if self.pi_fixed is None else self.pi_fixed
        cfg[nbf.CFG_CLAMP_OUTSIDE] = float(self.clamp_outside_support)
        cfg[nbf.CFG_HISTORY_DT] = self.history_dt
        cfg[nbf.CFG_WRITE_BACK] = float(self.write_back)
        cfg[nbf.CFG_SIGMA2_FIXED] = np.nan if self.sigma_fixed is None else self.sigma_fixed**2
        cfg[nbf.CFG_WEIGHT_INNOVATION] = float(self.weight_innovation)
        return cfg

    def mixture(self, pi_m: float, sigma_m: float) -> MixtureParams:
        return MixtureParams(pi_m, sigma_m, self.M_min, self.M_max)


def _pose_row(pose: Pose) -> np.ndarray:
    return np.concatenate([pose.quat, pose.translation])


def _row_pose(row) -> Pose:
    return Pose(row[:4], row[4:])


@dataclass(eq=False)
class FilterState:
    poses: np.ndarray  # (3, 7) rows (qx, qy, qz, qw, tx, ty, tz) for xi_c, xi_i, xi_j
    times: np.ndarray  # (3,) t_c, t_i, t_j
    scalars: np.ndarray  # (5,) C, beta_a, beta_b, ig_alpha, ig_beta
    P: np.ndarray  # (19, 19)
    scale: float  # mean scene depth; translation unit of the normalized coordinates

    def copy(self) -> FilterState:
        return FilterState(self.poses.copy(), self.times.copy(), self.scalars.copy(), self.P.copy(), self.scale)

    @property
    def xi_c(self) -> Pose:
        return _row_pose(self.poses[0])

    @property
    def xi_i(self) -> Pose:
        return _row_pose(self.poses[1])

    @property
    def xi_j(self) -> Pose:
        return _row_pose(self.poses[2])

    @property
    def C(self) -> float:
        return float(self.scalars[nbf.S_C])

    @property
    def beta_a(self) -> float:
        return float(self.scalars[nbf.S_BETA_A])

    @property
    def beta_b(self) -> float:
        return float(self.scalars[nbf.S_BETA_B])

    @property
    def ig_alpha(self) -> float:
        return float(self.scalars[nbf.S_IG_ALPHA])

    @property
    def ig_beta(self) -> float:
        return float(self.scalars[nbf.S_IG_BETA])

    @property
    def pi_hat(self) -> float:
        return self.beta_a / (self.beta_a + self.beta_b)

    @property
    def sigma2_hat(self) -> float:
        return self.ig_beta / (self.ig_alpha - 1.0)

    @property
    def mean(self) -> np.ndarray:
        """19-vector: per pose translation/scale and rotation vector, then C."""
        out = np.empty(nbf.NSTATE)
        for k in range(3):
            out[6 * k : 6 * k + 3] = self.poses[k, 4:] / self.scale
            out[6 * k + 3 : 6 * k + 6] = rotvec_from_quat(self.poses[k, :4])
        out[18] = self.C
        return out

    def reduced(self):
        return ReducedState(self.xi_c, self.xi_i, self.xi_j, float(self.times[1]), float(self.times[2]), self.C)

    def same_as(self, other: FilterState) -> bool:
        return all(
            np.array_equal(a, b)
            for a, b in ((self.poses, other.poses), (self.scalars, other.scalars), (self.P, other.P))
        )


class PoseHistory:
    """Ring buffer of (t, pose, 6x6 marginal covariance) with strictly increasing times.

    With ``min_dt > 0`` the newest entry stays provisional and is overwritten
    until it is at least ``min_dt`` newer than its predecessor.
    """

    def __init__(self, capacity: int = 1024, min_dt: float = 0.0):
        if capacity < 2:
            raise ValueError("history capacity must be at least 2")
        self.t = np.zeros(capacity)
        self.poses = np.zeros((capacity, 7))
        self.cov = np.zeros((capacity, 6, 6))
        self.idx = np.zeros(2, dtype=np.int64)  # start, count
        self.min_dt = float(min_dt)

    @property
    def capacity(self) -> int:
        return len(self.t)

    def __len__(self):
        return int(self.idx[1])

    def _phys(self, k: int) -> int:
        if not -len(self) <= k < len(self):
            raise IndexError(k)
        return int((self.idx[0] + k % len(self)) % self.capacity)

    def __getitem__(self, k: int):
        p = self._phys(k)
        return float(self.t[p]), _row_pose(self.poses[p]), self.cov[p].copy()

    def times(self) -> np.ndarray:
        return np.array([self.t[self._phys(k)] for k in range(len(self))])

    def append(self, t: float, pose: Pose, cov) -> None:
        P = np.zeros((nbf.NSTATE, nbf.NSTATE))
        P[:6, :6] = cov
        q, tr = pose.as_tuples()
        nbf.history_push(self.t, self.poses, self.cov, self.idx, float(t), q, tr, P, 0, self.min_dt)

    def bracket(self, t_query: float):
        """Physical indices and interpolation weight of the entries enclosing ``t_query``."""
        st, i, j, alpha = nbf.bracket(self.t, self.idx, float(t_query))
        if st != nb.OK:
            raise NoPriorPose(f"no history pose at or before t={t_query}")
        return i, j, alpha

    def copy(self) -> PoseHistory:
        out = PoseHistory.__new__(PoseHistory)
        out.t, out.poses, out.cov, out.idx = self.t.copy(), self.poses.copy(), self.cov.copy(), self.idx.copy()
        out.min_dt = self.min_dt
        return out


def initialize(initial_pose: Pose, pmap: PhotometricMap, camera: CameraIntrinsics,
               config: TrackerConfig = TrackerConfig(), t0: float = 0.0):
    """Filter state and history seeded at ``initial_pose`` at time ``t0``."""
    _, good = _render(initial_pose, pmap, camera, config.depth_iters)
    if good < MIN_OVERLAP * camera.width * camera.height:
        raise InsufficientOverlap(f"initial pose resolves only {good} pixels of the map")
    row = _pose_row(initial_pose)
    poses = np.stack([row, row, row])
    times = np.array([t0, t0 - HISTORY_EPS, t0])
    scalars = np.array([config.C0, config.beta_a, config.beta_b, config.ig_alpha, config.ig_beta], dtype=float)
    P = np.zeros((nbf.NSTATE, nbf.NSTATE))
    idx = np.arange(18)
    P[idx, idx] = config.initial_pose_std**2
    P[18, 18] = config.initial_threshold_std**2
    state = FilterState(poses, times, scalars, P, pmap.mean_scene_depth)
    history = PoseHistory(config.history_capacity, config.history_dt)
    cov0 = P[:6, :6].copy()
    history.append(t0 - HISTORY_EPS, initial_pose, cov0)
    history.append(t0, initial_pose, cov0)
    return state, history


def predict(state: FilterState, mm: MotionModelParams) -> FilterState:
    """Diffusion step: mean unchanged, diagonal variance grown up to ``max_std**2``."""
    out = state.copy()
    cfg = TrackerConfig(motion=mm).kernel_config(state.scale)
    nbf.predict_core(out.P, cfg)
    return out


def bind_past_poses(state: FilterState, history: PoseHistory, t_query: float) -> FilterState:
    """Install the history poses bracketing ``t_query`` as xi_i, xi_j with decoupled covariance."""
    i, j, _ = history.bracket(t_query)
    out = state.copy()
    nbf.bind_core(out.poses, out.times, out.P, history.t, history.poses, history.cov, i, j)
    return out


def inlier_weight(M0: float, mp: MixtureParams, clamp_outside: bool = False) -> float:
    return nbf.inlier_weight(float(M0), mp.pi_m, mp.sigma_m**2, mp.M_min, mp.M_max, clamp_outside)


def update(state: FilterState, event, pmap: PhotometricMap, timestamps: TimestampMap,
           history: PoseHistory, camera: CameraIntrinsics, config: TrackerConfig = TrackerConfig()):
    """Correction step for one event on a predicted, bound state.

    Returns ``(new_state, M0, w)``. Appends the corrected current pose to
    ``history`` and records the event in ``timestamps``; if the measurement is
    unavailable only ``timestamps`` changes and MeasurementUnavailable is raised.
    """
    try:
        lin = linearize(event, state.reduced(), pmap, timestamps, camera, config.fd_step, config.depth_iters)
    finally:
        timestamps.last_t[event.y, event.x] = max(timestamps.last_t[event.y, event.x], event.t)
    out = state.copy()
    cfg = config.kernel_config(state.scale)
    w = nbf.apply_update(out.poses, out.scalars, out.P, lin.J, lin.M0, cfg, np.zeros(nbf.NSTATE), np.zeros(nbf.NSTATE))
    out.times[0] = event.t
    q, t = _row_pose(out.poses[0]).as_tuples()
    nbf.history_push(history.t, history.poses, history.cov, history.idx, float(event.t), q, t, out.P, 0,
                     history.min_dt)
    return out, lin.M0, w


@dataclass
class TrackResult:
    status: np.ndarray
    diagnostics: np.ndarray  # rows (M0, w, C, pi, sigma)
    trajectory: Trajectory
    elapsed: float = 0.0

    @property
    def processed(self) -> np.ndarray:
        return self.status == nb.OK

    def skip_counts(self) -> dict:
        names = nb.STATUS_NAMES
        return {names[k]: int(np.sum(self.status == k)) for k in range(1, len(names)) if np.any(self.status == k)}


class Tracker:
    """Streaming tracker; feed time-ordered event batches to :meth:`process`."""

    def __init__(self, pmap: PhotometricMap, camera: CameraIntrinsics, initial_pose: Pose,
                 config: TrackerConfig = TrackerConfig(), t0: float = 0.0):
        self.pmap = pmap
        self.camera = camera
        self.config = config
        self.state, self.history = initialize(initial_pose, pmap, camera, config, t0)
        self.timestamps = TimestampMap(camera.width, camera.height)
        self._cfg = config.kernel_config(pmap.mean_scene_depth)
        self._cam = camera.as_array()
        self.t0 = t0

    def step(self, event):
        """Process one event; same kernel as :meth:`process`. Returns (status, M0, w)."""
        logI, depth, kf_R, kf_t, kf_intr, kf_pose = self.pmap.packed()
        s, h = self.state, self.history
        buf = np.zeros((3, nbf.NSTATE))
        return nbf.process_event(
            int(event.x), int(event.y), float(event.t), int(event.p), s.poses, s.times, s.scalars, s.P,
            h.t, h.poses, h.cov, h.idx, self.timestamps.last_t, self._cam, logI, depth, kf_R, kf_t,
            kf_intr, kf_pose, self._cfg, buf[0], buf[1], buf[2],
        )

    def process(self, events: EventArray, decimate: int = 1) -> TrackResult:
        n = len(events)
        decimate = max(1, int(decimate))
        status = np.zeros(n, dtype=np.int8)
        diag = np.zeros((n, 5))
        rows = n // decimate + 1
        traj_t = np.zeros(rows)
        traj_pose = np.zeros((rows, 7))
        logI, depth, kf_R, kf_t, kf_intr, kf_pose = self.pmap.packed()
        s = self.state
        start = time.perf_counter()
        written = 0
        if n:
            written = nbf.run_filter(
                events.x, events.y, events.t, events.p, s.poses, s.times, s.scalars, s.P,
                self.history.t, self.history.poses, self.history.cov, self.history.idx,
                self.timestamps.last_t, self._cam, logI, depth, kf_R, kf_t, kf_intr, kf_pose,
                self._cfg, decimate, status, diag, traj_t, traj_pose,
            )
        elapsed = time.perf_counter() - start
        traj = Trajectory(traj_t[:written], traj_pose[:written, :4], traj_pose[:written, 4:])
        return TrackResult(status, diag, traj, elapsed)

    def initial_sample(self) -> Trajectory:
        row = self.history.poses[self.history._phys(0)]
        return Trajectory([self.t0], [row[:4]], [row[4:]])
