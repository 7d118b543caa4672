"""Contrast measurement of an event against the photometric map.

An event at pixel ``u`` is transferred into the reference image twice: with
the current pose and with the pose interpolated at the time of the previous
event at ``u``. The log-intensity difference between both reference samples
predicts the contrast the event should carry; the dimensionless residual
``M = dlogI / C - 1`` is zero for an ideal event.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _nbfilter as nbf
from . import _nbgeom as nb
from .errors import (
    BehindCamera,
    InvalidDepth,
    NoPriorEvent,
    NoPriorPose,
    NonFinite,
    OutOfBounds,
)
from .photomap import PhotometricMap, select_reference
from .se3 import CameraIntrinsics, Pose, compose, inverse
from .sim import Event, TimestampMap

C_MIN_FLOOR = 1e-3
FD_STEP = 1e-4
DEPTH_ITERS = 3

_ERRORS = {
    nb.OUT_OF_BOUNDS: OutOfBounds,
    nb.INVALID_DEPTH: InvalidDepth,
    nb.BEHIND_CAMERA: BehindCamera,
    nb.NO_PRIOR_EVENT: NoPriorEvent,
    nb.NO_PRIOR_POSE: NoPriorPose,
    nb.NON_FINITE: NonFinite,
}


def raise_status(status: int, what: str = "measurement"):
    if status != nb.OK:
        raise _ERRORS[status](f"{what}: {nb.STATUS_NAMES[status]}")


@dataclass(frozen=True)
class ReducedState:
    """Poses and threshold a measurement depends on. ``C`` is the threshold magnitude."""

    xi_c: Pose
    xi_i: Pose
    xi_j: Pose
    t_i: float
    t_j: float
    C: float

    def __post_init__(self):
        if not abs(self.C) > C_MIN_FLOOR:
            raise ValueError(f"|C| must exceed {C_MIN_FLOOR}")
        if not self.t_j > self.t_i:
            raise ValueError("t_i must precede t_j")

    @classmethod
    def static(cls, pose: Pose, C: float, t: float = 0.0) -> ReducedState:
        return cls(pose, pose, pose, t - 1e-6, t, C)


@dataclass(frozen=True)
class LinearizedMeasurement:
    M0: float
    J: np.ndarray  # d M / d (xi_c, xi_i, xi_j, C) in normalized coordinates
    dlogI: float


@dataclass(frozen=True)
class MixtureParams:
    pi_m: float
    sigma_m: float
    M_min: float = -5.0
    M_max: float = 5.0

    def __post_init__(self):
        if not 0.0 <= self.pi_m <= 1.0:
            raise ValueError("pi_m must lie in [0, 1]")
        if not self.sigma_m > 0:
            raise ValueError("sigma_m must be positive")
        if not self.M_min < 0 < self.M_max:
            raise ValueError("need M_min < 0 < M_max")

    @property
    def uniform_density(self) -> float:
        return 1.0 / (self.M_max - self.M_min)


@dataclass(frozen=True)
class ExpFamilyTerm:
    """One term ``exp(eta . T(s) - A)`` of the likelihood, with unit base measure.

    ``T(s)`` is laid out as [s s^T / var (n*n, row-major), s / var (n),
    1 / var, log sigma, log pi, log(1 - pi)], where ``s`` is the deviation of
    the reduced state from the linearization point.
    """

    eta: np.ndarray
    A: float
    n: int

    LAYOUT = ("ss/var", "s/var", "1/var", "log_sigma", "log_pi", "log_1m_pi")

    def block(self, name: str) -> np.ndarray:
        n = self.n
        sizes = {"ss/var": n * n, "s/var": n, "1/var": 1, "log_sigma": 1, "log_pi": 1, "log_1m_pi": 1}
        off = 0
        for key in self.LAYOUT:
            if key == name:
                return self.eta[off : off + sizes[key]]
            off += sizes[key]
        raise KeyError(name)


def calibrated(camera: CameraIntrinsics, x, y) -> tuple[float, float]:
    return (x - camera.cx) / camera.fx, (y - camera.cy) / camera.fy


def transfer_event(u, T_RC: Pose, Z: float) -> np.ndarray:
    """``pi(T_RC * pi^-1(u, Z))`` for calibrated coordinates ``u``."""
    R = tuple(T_RC.rotation.ravel())
    st, vx, vy = nb.transfer(float(u[0]), float(u[1]), R, tuple(T_RC.translation), float(Z))
    if st != nb.OK:
        raise BehindCamera(f"transfer of {tuple(u)} at depth {Z} lands behind the reference camera")
    return np.array([vx, vy])


def lookup_depth(u, camera_pose: Pose, pmap: PhotometricMap, kf: int | None = None,
                 n_iter: int = DEPTH_ITERS, z0: float | None = None) -> float:
    """Depth along calibrated ray ``u`` of the camera at ``camera_pose``, by fixed-point iteration."""
    if kf is None:
        kf = select_reference(pmap, camera_pose)
    _, depth, R_rw, t_rw, intr = pmap.kernel_args(kf)
    q, t = camera_pose.as_tuples()
    R_rc, t_rc = nb.relative_to_ref(q, t, R_rw, t_rw)
    z0 = pmap.mean_scene_depth if z0 is None else z0
    st, Z = nb.lookup_depth(float(u[0]), float(u[1]), R_rc, t_rc, depth, intr, z0, n_iter)
    raise_status(st, "depth lookup")
    return Z


def reference_from_camera(camera_pose: Pose, pmap: PhotometricMap, kf: int) -> Pose:
    return compose(inverse(pmap.keyframes[kf].pose), camera_pose)


def _past_time(event: Event, timestamps: TimestampMap) -> float:
    prev = timestamps.last_t[event.y, event.x]
    if not np.isfinite(prev):
        raise NoPriorEvent(f"no earlier event at pixel ({event.x}, {event.y})")
    if not prev < event.t:
        raise NoPriorPose("zero time since the previous event at this pixel")
    return float(prev)


def _alpha(state: ReducedState, t_query: float) -> float:
    return min(1.0, max(0.0, (t_query - state.t_i) / (state.t_j - state.t_i)))


def _kernel_inputs(event, state, pmap, timestamps, camera):
    t_query = _past_time(event, timestamps)
    kf = select_reference(pmap, state.xi_c)
    ux, uy = calibrated(camera, event.x, event.y)
    return kf, ux, uy, _alpha(state, t_query)


def predicted_contrast(event: Event, state: ReducedState, pmap: PhotometricMap,
                       timestamps: TimestampMap, camera: CameraIntrinsics,
                       n_iter: int = DEPTH_ITERS) -> float:
    """Predicted log-intensity change at the event pixel since its previous event."""
    kf, ux, uy, alpha = _kernel_inputs(event, state, pmap, timestamps, camera)
    logI, depth, R_rw, t_rw, intr = pmap.kernel_args(kf)
    z0 = pmap.mean_scene_depth
    qc, tc = state.xi_c.as_tuples()
    st, Lc = nb.eval_log_intensity(ux, uy, qc, tc, logI, depth, R_rw, t_rw, intr, z0, n_iter)
    raise_status(st, "current transfer")
    qi, ti = state.xi_i.as_tuples()
    qj, tj = state.xi_j.as_tuples()
    qp, tp = nb.interp_pose(qi, ti, qj, tj, alpha)
    st, Lp = nb.eval_log_intensity(ux, uy, qp, tp, logI, depth, R_rw, t_rw, intr, z0, n_iter)
    raise_status(st, "past transfer")
    return Lc - Lp


def measurement(event: Event, state: ReducedState, pmap: PhotometricMap, timestamps: TimestampMap,
                camera: CameraIntrinsics, n_iter: int = DEPTH_ITERS) -> float:
    """``dlogI / C - 1`` with the threshold signed by the event polarity."""
    dL = predicted_contrast(event, state, pmap, timestamps, camera, n_iter)
    return dL / (event.p * state.C) - 1.0


def linearize(event: Event, state: ReducedState, pmap: PhotometricMap, timestamps: TimestampMap,
              camera: CameraIntrinsics, step: float = FD_STEP, n_iter: int = DEPTH_ITERS
              ) -> LinearizedMeasurement:
    """Residual and gradient over the 19 reduced-state coordinates.

    Pose columns are central differences with ``step`` in normalized units
    (translation divided by the mean scene depth, rotation in radians, body
    frame); the threshold column is analytic.
    """
    kf, ux, uy, alpha = _kernel_inputs(event, state, pmap, timestamps, camera)
    logI, depth, R_rw, t_rw, intr = pmap.kernel_args(kf)
    qc, tc = state.xi_c.as_tuples()
    qi, ti = state.xi_i.as_tuples()
    qj, tj = state.xi_j.as_tuples()
    J = np.zeros(nbf.NSTATE)
    st, M0, dL = nbf.linearize_core(ux, uy, float(event.p), qc, tc, qi, ti, qj, tj, alpha, float(state.C),
                                    logI, depth, R_rw, t_rw, intr, pmap.mean_scene_depth, n_iter,
                                    step, J)
    raise_status(st, "linearization")
    return LinearizedMeasurement(M0, J, dL)


def mixture_density(M: float, mp: MixtureParams) -> float:
    return nbf.mixture_pdf(float(M), mp.pi_m, mp.sigma_m**2, mp.M_min, mp.M_max)


def exp_family_terms(lin: LinearizedMeasurement, mp: MixtureParams) -> tuple[ExpFamilyTerm, ExpFamilyTerm]:
    """Inlier and outlier terms of the linearized likelihood as exponential families.

    The outlier term's log-normalizer is ``+log(M_max - M_min)`` so that
    ``exp(eta . T - A)`` equals the uniform mass ``(1 - pi) / (M_max - M_min)``.
    """
    J = np.asarray(lin.J, dtype=float)
    n = J.size
    eta1 = np.concatenate([-0.5 * np.outer(J, J).ravel(), -lin.M0 * J, [-0.5 * lin.M0**2, -1.0, 1.0, 0.0]])
    eta2 = np.zeros_like(eta1)
    eta2[-1] = 1.0
    return (
        ExpFamilyTerm(eta1, 0.5 * math.log(2 * math.pi), n),
        ExpFamilyTerm(eta2, math.log(mp.M_max - mp.M_min), n),
    )


def sufficient_statistics(ds: np.ndarray, pi_m: float, sigma_m: float) -> np.ndarray:
    ds = np.asarray(ds, dtype=float)
    var = sigma_m**2
    return np.concatenate(
        [np.outer(ds, ds).ravel() / var, ds / var, [1.0 / var, math.log(sigma_m), math.log(pi_m), math.log1p(-pi_m)]]
    )


def likelihood_from_terms(terms, ds, pi_m: float, sigma_m: float) -> float:
    """Sum of ``exp(eta . T(ds) - A)`` over the terms."""
    T = sufficient_statistics(ds, pi_m, sigma_m)
    return float(sum(math.exp(float(term.eta @ T) - term.A) for term in terms))
