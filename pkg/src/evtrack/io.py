"""Text formats for event streams, trajectories and run configuration.

Events are ``t x y p`` lines with ``p`` in {0, 1} on disk and {-1, +1} in
memory. Trajectories are ``t tx ty tz qx qy qz qw`` lines. Run configuration
is a flat list of ``key = value`` pairs; ``#`` starts a comment.
"""

from __future__ import annotations

import math
import typing
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ParseError, UnknownKey
from .se3 import CameraIntrinsics
from .sim import EventArray, SimParams, Trajectory
from .tracker import MotionModelParams, TrackerConfig

QUAT_NORM_TOL = 1e-3


class ReorderedWarning(UserWarning):
    """Lenient reading stable-sorted a stream whose timestamps were not monotone."""


# --- events ----------------------------------------------------------------------


def _parse_event_line(line: str, path, lineno: int):
    parts = line.split()
    if len(parts) != 4:
        raise ParseError(f"expected 't x y p', got {line.strip()!r}", path, lineno)
    try:
        t = float(parts[0])
        x, y, p = int(parts[1]), int(parts[2]), int(parts[3])
    except ValueError:
        raise ParseError(f"malformed event {line.strip()!r}", path, lineno) from None
    if not math.isfinite(t):
        raise ParseError("non-finite timestamp", path, lineno)
    if x < 0 or y < 0:
        raise ParseError("negative pixel coordinate", path, lineno)
    if p not in (0, 1):
        raise ParseError(f"polarity must be 0 or 1, got {p}", path, lineno)
    return t, x, y, 1 if p == 1 else -1


def read_events(path, strict: bool = True, max_events: int | None = None) -> EventArray:
    """Read an event file.

    Non-monotone timestamps raise ParseError when ``strict``; otherwise the
    stream is stable-sorted and a :class:`ReorderedWarning` is issued.
    """
    t, x, y, p = [], [], [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if max_events is not None and len(t) >= max_events:
                break
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            ev = _parse_event_line(line, path, lineno)
            if strict and t and ev[0] < t[-1]:
                raise ParseError(f"timestamp {ev[0]} precedes {t[-1]}", path, lineno)
            t.append(ev[0])
            x.append(ev[1])
            y.append(ev[2])
            p.append(ev[3])
    events = EventArray(x, y, t, p)
    if len(events) and np.any(np.diff(events.t) < 0):
        warnings.warn(f"{path}: timestamps not monotone; stream stable-sorted", ReorderedWarning, stacklevel=2)
        events = events[np.argsort(events.t, kind="stable")]
    return events


def write_events(path, events) -> None:
    if not isinstance(events, EventArray):
        events = EventArray.from_events(events)
    pol = (events.p > 0).astype(np.int64)
    with open(path, "w") as f:
        if len(events):
            np.savetxt(f, np.column_stack([events.t, events.x, events.y, pol]), fmt=["%.9f", "%d", "%d", "%d"])


# --- trajectories ----------------------------------------------------------------


def read_trajectory(path) -> Trajectory:
    ts, qs, tr = [], [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ParseError(f"expected 't tx ty tz qx qy qz qw', got {line.strip()!r}", path, lineno)
            try:
                vals = [float(v) for v in parts]
            except ValueError:
                raise ParseError(f"malformed pose {line.strip()!r}", path, lineno) from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError("non-finite value", path, lineno)
            q = np.array(vals[4:])
            norm = np.linalg.norm(q)
            if abs(norm - 1.0) > QUAT_NORM_TOL:
                raise ParseError(f"quaternion norm {norm:.6f} not within {QUAT_NORM_TOL} of 1", path, lineno)
            if ts and vals[0] < ts[-1]:
                raise ParseError(f"timestamp {vals[0]} precedes {ts[-1]}", path, lineno)
            ts.append(vals[0])
            tr.append(vals[1:4])
            qs.append(q / norm)
    return Trajectory(ts, np.reshape(qs, (-1, 4)), np.reshape(tr, (-1, 3)))


def write_trajectory(path, traj: Trajectory) -> None:
    with open(path, "w") as f:
        if len(traj):
            np.savetxt(f, np.column_stack([traj.times, traj.trans, traj.quats]),
                       fmt=["%.9f"] + ["%.12f"] * 7)


def write_diagnostics(path, times, diagnostics, status) -> None:
    """Per-event ``t,M0,w,C_hat,pi_hat,sigma_hat,status`` CSV."""
    with open(path, "w") as f:
        f.write("t,M0,w,C_hat,pi_hat,sigma_hat,status\n")
        if len(times):
            np.savetxt(f, np.column_stack([times, diagnostics, status]),
                       fmt=["%.9f"] + ["%.9g"] * 5 + ["%d"], delimiter=",")


# --- run configuration -----------------------------------------------------------


@dataclass
class RunConfig:
    """Every tunable of a simulate / track / evaluate run."""

    # scenario
    scene: str = "planar_rocks"
    scene_seed: int | None = None
    trajectory: str = "shake"
    duration: float = 3.0
    trajectory_dt: float = 1e-3
    trajectory_seed: int = 1
    trans_amplitude: float = 0.04
    rot_amplitude_deg: float = 4.0
    frequency: float = 0.5
    orbit_radius: float = 0.05
    orbit_period: float = 2.0
    knot_dt: float = 0.5
    # event sensor
    sensor_width: int = 128
    sensor_height: int = 128
    sensor_fx: float = 110.0
    sensor_fy: float = 110.0
    sensor_cx: float = 63.5
    sensor_cy: float = 63.5
    # simulator
    seed: int = 3
    C_plus: float = 0.15
    C_minus: float = -0.15
    threshold_noise_std: float = 0.02
    outlier_rate: float = 0.0
    outlier_fraction: float = 0.0
    render_dt: float = 1e-3
    depth_iters: int = 3
    # tracker
    C0: float = 0.15
    initial_pose_std: float = 0.005
    initial_threshold_std: float = 0.005
    per_event_diffusion_std: float = 1e-4
    max_std: float = 0.03
    threshold_diffusion_std: float = 1e-5
    beta_a: float = 1.0
    beta_b: float = 1.0
    ig_alpha: float = 3.0
    ig_beta: float = 0.08
    M_min: float = -5.0
    M_max: float = 5.0
    C_min_floor: float = 1e-3
    fd_step: float = 1e-4
    history_capacity: int = 1024
    history_dt: float = 1e-3
    write_back: bool = True
    weight_innovation: bool = True
    clamp_outside_support: bool = False
    pi_fixed: float | None = None
    sigma_fixed: float | None = None
    init_offset_pct: float = 0.0
    # output and evaluation
    decimate: int = 100
    uniform_dt: float | None = None
    max_rms_position_pct: float = 3.0
    max_rms_orientation_deg: float = 2.5
    divergence_max_residual: float = 0.5

    def tracker_config(self) -> TrackerConfig:
        motion = MotionModelParams(self.per_event_diffusion_std, self.max_std, self.threshold_diffusion_std)
        names = {f.name for f in fields(TrackerConfig)} - {"motion", "depth_iters"}
        kw = {k: getattr(self, k) for k in names if hasattr(self, k)}
        return TrackerConfig(motion=motion, depth_iters=self.depth_iters, **kw)

    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.sensor_fx, self.sensor_fy, self.sensor_cx, self.sensor_cy,
                                self.sensor_width, self.sensor_height)

    def sim_params(self, camera, seed: int | None = None) -> SimParams:
        return SimParams(camera, self.C_plus, self.C_minus, self.threshold_noise_std, self.outlier_rate,
                         self.render_dt, self.seed if seed is None else seed, self.depth_iters)

    def motion_params(self) -> dict:
        if self.trajectory == "shake":
            return dict(trans_amplitude=self.trans_amplitude, rot_amplitude=math.radians(self.rot_amplitude_deg),
                        frequency=self.frequency, seed=self.trajectory_seed)
        if self.trajectory == "spline":
            return dict(trans_amplitude=self.trans_amplitude, rot_amplitude=math.radians(self.rot_amplitude_deg),
                        knot_dt=self.knot_dt, seed=self.trajectory_seed)
        if self.trajectory == "orbit":
            return dict(radius=self.orbit_radius, period=self.orbit_period)
        raise ValueError(f"unknown trajectory kind {self.trajectory!r}")

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            lines.append(f"{k} = {_format_value(v)}")
        return "\n".join(lines) + "\n"


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _convert(raw: str, annotation, path, lineno):
    hint = typing.get_type_hints(RunConfig)[annotation]
    args = typing.get_args(hint)
    optional = type(None) in args
    base = next((a for a in args if a is not type(None)), hint) if args else hint
    if optional and raw.lower() == "none":
        return None
    try:
        if base is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if base is int:
            return int(raw)
        if base is float:
            val = float(raw)
            if not math.isfinite(val):
                raise ValueError(raw)
            return val
        return raw
    except ValueError:
        raise ParseError(f"invalid {base.__name__} for {annotation!r}: {raw!r}", path, lineno) from None


def parse_config(text: str, path=None, base: RunConfig | None = None) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    values = asdict(base if base is not None else RunConfig())
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ParseError(f"expected 'key = value', got {body!r}", path, lineno)
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in known:
            raise UnknownKey(f"unknown key {key!r}", path, lineno)
        if key in seen:
            raise ParseError(f"duplicate key {key!r}", path, lineno)
        if not raw:
            raise ParseError(f"missing value for {key!r}", path, lineno)
        seen.add(key)
        values[key] = _convert(raw, key, path, lineno)
    try:
        cfg = RunConfig(**values)
        cfg.tracker_config()
        cfg.sim_params(cfg.camera())
        if cfg.trajectory not in ("shake", "spline", "orbit"):
            raise ValueError(f"unknown trajectory kind {cfg.trajectory!r}")
    except ValueError as exc:
        raise ParseError(str(exc), path) from None
    return cfg


def read_config(path) -> RunConfig:
    with open(path) as f:
        return parse_config(f.read(), path)
