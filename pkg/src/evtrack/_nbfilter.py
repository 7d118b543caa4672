"""Numba kernels for the per-event robust filter.

State layout (19 normalized coordinates): current pose 0-5, past pose i 6-11,
past pose j 12-17, contrast threshold 18. Each pose block is
(tx, ty, tz) / scale followed by a body-frame rotation vector.
"""

import math

import numpy as np
from numba import njit

from ._nbgeom import (
    NO_PRIOR_EVENT,
    NO_PRIOR_POSE,
    NON_FINITE,
    OK,
    eval_log_intensity,
    interp_pose,
    perturb_pose,
    retract_pose,
    select_keyframe,
)

NSTATE = 19

# indices into the float64 config vector
CFG_SCALE = 0
CFG_FD_STEP = 1
CFG_DEPTH_ITERS = 2
CFG_POSE_DIFF_VAR = 3
CFG_THR_DIFF_VAR = 4
CFG_MAX_VAR = 5
CFG_M_MIN = 6
CFG_M_MAX = 7
CFG_C_FLOOR = 8
CFG_PI_FIXED = 9  # NaN -> estimate
CFG_CLAMP_OUTSIDE = 10
CFG_HISTORY_DT = 11
CFG_WRITE_BACK = 12
CFG_SIGMA2_FIXED = 13  # NaN -> estimate
CFG_WEIGHT_INNOVATION = 14  # nonzero -> inlier Gaussian evaluated with J P J^T + var
CFG_SIZE = 15

# indices into the scalar state vector
S_C = 0
S_BETA_A = 1
S_BETA_B = 2
S_IG_ALPHA = 3
S_IG_BETA = 4

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@njit(cache=True, inline="always")
def _pose(a, k):
    return (a[k, 0], a[k, 1], a[k, 2], a[k, 3]), (a[k, 4], a[k, 5], a[k, 6])


@njit(cache=True, inline="always")
def _store(a, k, q, t):
    a[k, 0] = q[0]
    a[k, 1] = q[1]
    a[k, 2] = q[2]
    a[k, 3] = q[3]
    a[k, 4] = t[0]
    a[k, 5] = t[1]
    a[k, 6] = t[2]


@njit(cache=True)
def gaussian_pdf(x, var):
    return _INV_SQRT_2PI / math.sqrt(var) * math.exp(-0.5 * x * x / var)


@njit(cache=True)
def mixture_pdf(M, pi_m, var, m_min, m_max):
    u = 1.0 / (m_max - m_min) if (M >= m_min and M <= m_max) else 0.0
    return pi_m * gaussian_pdf(M, var) + (1.0 - pi_m) * u


@njit(cache=True)
def inlier_weight(M0, pi_m, var, m_min, m_max, clamp_outside):
    if clamp_outside and M0 < m_min:
        M0 = m_min
    elif clamp_outside and M0 > m_max:
        M0 = m_max
    u = 1.0 / (m_max - m_min) if (M0 >= m_min and M0 <= m_max) else 0.0
    num = pi_m * gaussian_pdf(M0, var)
    den = num + (1.0 - pi_m) * u
    if den == 0.0:
        # Gaussian underflow outside the support: limit of num/num
        return 1.0 if pi_m > 0.0 else 0.0
    return num / den


@njit(cache=True)
def bracket(h_t, h_idx, tq):
    """Bracketing history entries for time ``tq``: (status, phys_i, phys_j, alpha)."""
    cap = h_t.shape[0]
    start = h_idx[0]
    n = h_idx[1]
    if n < 2 or tq < h_t[start]:
        return NO_PRIOR_POSE, -1, -1, 0.0
    # largest logical m with h_t[m] <= tq
    lo = 0
    hi = n - 1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if h_t[(start + mid) % cap] <= tq:
            lo = mid
        else:
            hi = mid - 1
    if lo == n - 1:
        return OK, (start + n - 2) % cap, (start + n - 1) % cap, 1.0
    i = (start + lo) % cap
    j = (start + lo + 1) % cap
    return OK, i, j, (tq - h_t[i]) / (h_t[j] - h_t[i])


@njit(cache=True)
def history_push(h_t, h_pose, h_cov, h_idx, t, q, tr, P, off, history_dt):
    """Append a pose (covariance block at ``off`` of ``P``), or overwrite the uncommitted head."""
    cap = h_t.shape[0]
    start = h_idx[0]
    n = h_idx[1]
    overwrite = False
    if n >= 1 and t <= h_t[(start + n - 1) % cap]:
        overwrite = True
    elif n >= 2 and h_t[(start + n - 1) % cap] - h_t[(start + n - 2) % cap] < history_dt:
        overwrite = True
    if not overwrite:
        if n < cap:
            n += 1
            h_idx[1] = n
        else:
            start = (start + 1) % cap
            h_idx[0] = start
    k = (start + n - 1) % cap
    h_t[k] = max(t, h_t[k]) if overwrite else t
    _store(h_pose, k, q, tr)
    for a in range(6):
        for b in range(6):
            h_cov[k, a, b] = P[off + a, off + b]


@njit(cache=True)
def _eval_past(side, k, step, ux, uy, qi, ti, qj, tj, alpha, logI, depth, R_rw, t_rw, intr, scale,
               n_iter):
    if side == 0:
        q1, t1 = perturb_pose(qi, ti, k, step, scale)
        qp, tp = interp_pose(q1, t1, qj, tj, alpha)
    else:
        q1, t1 = perturb_pose(qj, tj, k, step, scale)
        qp, tp = interp_pose(qi, ti, q1, t1, alpha)
    return eval_log_intensity(ux, uy, qp, tp, logI, depth, R_rw, t_rw, intr, scale, n_iter)


@njit(cache=True)
def linearize_core(ux, uy, pol, qc, tc, qi, ti, qj, tj, alpha, C, logI, depth, R_rw, t_rw, intr,
                   scale, n_iter, h, J):
    """Residual, contrast and Jacobian (written to ``J``) of one event.

    Returns (status, M0, dlogI). Pose columns use central differences with
    step ``h``; the threshold column is analytic.
    """
    st, Lc = eval_log_intensity(ux, uy, qc, tc, logI, depth, R_rw, t_rw, intr, scale, n_iter)
    if st != OK:
        return st, 0.0, 0.0
    qp, tp = interp_pose(qi, ti, qj, tj, alpha)
    st, Lp = eval_log_intensity(ux, uy, qp, tp, logI, depth, R_rw, t_rw, intr, scale, n_iter)
    if st != OK:
        return st, 0.0, 0.0
    Cs = pol * C
    dL = Lc - Lp
    M0 = dL / Cs - 1.0
    inv = 1.0 / (2.0 * h * Cs)
    for k in range(6):
        q1, t1 = perturb_pose(qc, tc, k, h, scale)
        st, a = eval_log_intensity(ux, uy, q1, t1, logI, depth, R_rw, t_rw, intr, scale, n_iter)
        if st != OK:
            return NON_FINITE, M0, dL
        q1, t1 = perturb_pose(qc, tc, k, -h, scale)
        st, b = eval_log_intensity(ux, uy, q1, t1, logI, depth, R_rw, t_rw, intr, scale, n_iter)
        if st != OK:
            return NON_FINITE, M0, dL
        J[k] = (a - b) * inv
    for side in range(2):
        for k in range(6):
            st, a = _eval_past(side, k, h, ux, uy, qi, ti, qj, tj, alpha, logI, depth, R_rw, t_rw,
                               intr, scale, n_iter)
            if st != OK:
                return NON_FINITE, M0, dL
            st, b = _eval_past(side, k, -h, ux, uy, qi, ti, qj, tj, alpha, logI, depth, R_rw, t_rw,
                               intr, scale, n_iter)
            if st != OK:
                return NON_FINITE, M0, dL
            J[6 + 6 * side + k] = -(a - b) * inv
    # M = dL / (pol * C) - 1 differentiated w.r.t. the threshold magnitude C
    J[18] = -pol * dL / (C * C)
    for k in range(NSTATE):
        if not abs(J[k]) < np.inf:
            return NON_FINITE, M0, dL
    return OK, M0, dL


@njit(cache=True)
def predict_core(P, cfg):
    pose_var = cfg[CFG_POSE_DIFF_VAR]
    cap = cfg[CFG_MAX_VAR]
    for d in range(18):
        room = cap - P[d, d]
        if room > 0.0:
            P[d, d] += min(pose_var, room)
    P[18, 18] += cfg[CFG_THR_DIFF_VAR]


@njit(cache=True)
def bind_core(poses, times, P, h_t, h_pose, h_cov, i, j):
    for a in range(6, 18):
        for b in range(NSTATE):
            P[a, b] = 0.0
            P[b, a] = 0.0
    for a in range(6):
        for b in range(6):
            P[6 + a, 6 + b] = h_cov[i, a, b]
            P[12 + a, 12 + b] = h_cov[j, a, b]
    q, t = _pose(h_pose, i)
    _store(poses, 1, q, t)
    q, t = _pose(h_pose, j)
    _store(poses, 2, q, t)
    times[1] = h_t[i]
    times[2] = h_t[j]


@njit(cache=True)
def innovation(P, J, PJ):
    """Writes ``P J`` to ``PJ`` and returns ``J P J^T``."""
    n = P.shape[0]
    acc = 0.0
    for a in range(n):
        s = 0.0
        for b in range(n):
            s += P[a, b] * J[b]
        PJ[a] = s
        acc += J[a] * s
    return acc


@njit(cache=True)
def _gain_step(mean_delta, P, PJ, M0, S, w):
    n = P.shape[0]
    for a in range(n):
        mean_delta[a] = -w * PJ[a] / S * M0
    if w != 0.0:
        f = w / S
        for a in range(n):
            ka = f * PJ[a]
            for b in range(n):
                P[a, b] -= ka * PJ[b]
        for a in range(n):
            for b in range(a + 1, n):
                s = 0.5 * (P[a, b] + P[b, a])
                P[a, b] = s
                P[b, a] = s


@njit(cache=True)
def weighted_ekf_update(mean_delta, P, J, M0, var, w, PJ):
    """Kalman gain against residual ``M0``; scaled by ``w``. Writes the increment and updates ``P``."""
    S = innovation(P, J, PJ) + var
    _gain_step(mean_delta, P, PJ, M0, S, w)
    return S


@njit(cache=True)
def point_estimates(scal, cfg):
    pi_m = cfg[CFG_PI_FIXED]
    if pi_m != pi_m:
        pi_m = scal[S_BETA_A] / (scal[S_BETA_A] + scal[S_BETA_B])
    var = cfg[CFG_SIGMA2_FIXED]
    if var != var:
        var = scal[S_IG_BETA] / (scal[S_IG_ALPHA] - 1.0)
    return pi_m, var


@njit(cache=True)
def apply_update(poses, scal, P, J, M0, cfg, delta, PJ):
    """Correction step on a predicted, bound state. Returns the inlier weight."""
    pi_m, var = point_estimates(scal, cfg)
    jpj = innovation(P, J, PJ)
    wvar = var + jpj if cfg[CFG_WEIGHT_INNOVATION] != 0.0 else var
    w = inlier_weight(M0, pi_m, wvar, cfg[CFG_M_MIN], cfg[CFG_M_MAX], cfg[CFG_CLAMP_OUTSIDE] != 0.0)
    _gain_step(delta, P, PJ, M0, jpj + var, w)
    scale = cfg[CFG_SCALE]
    for k in range(3):
        o = 6 * k
        q, t = _pose(poses, k)
        q, t = retract_pose(q, t, delta[o], delta[o + 1], delta[o + 2], delta[o + 3], delta[o + 4],
                            delta[o + 5], scale)
        _store(poses, k, q, t)
    scal[S_C] = max(scal[S_C] + delta[18], cfg[CFG_C_FLOOR])
    scal[S_BETA_A] += w
    scal[S_BETA_B] += 1.0 - w
    scal[S_IG_ALPHA] += 0.5 * w
    scal[S_IG_BETA] += 0.5 * w * M0 * M0
    return w


@njit(cache=True)
def process_event(x, y, t, pol, poses, times, scal, P, h_t, h_pose, h_cov, h_idx, last_t,
                  cam, logI, depth, kf_R, kf_t, kf_intr, kf_pose, cfg, J, delta, PJ):
    """Full per-event step. Returns (status, M0, w); state untouched unless status is OK."""
    prev = last_t[y, x]
    last_t[y, x] = t
    if not prev > -np.inf:
        return NO_PRIOR_EVENT, 0.0, 0.0
    if not t > prev:
        return NO_PRIOR_POSE, 0.0, 0.0
    st, i, j, alpha = bracket(h_t, h_idx, prev)
    if st != OK:
        return st, 0.0, 0.0
    scale = cfg[CFG_SCALE]
    qc, tc = _pose(poses, 0)
    k = select_keyframe(qc, tc, kf_pose, scale)
    R_rw = (kf_R[k, 0], kf_R[k, 1], kf_R[k, 2], kf_R[k, 3], kf_R[k, 4],
            kf_R[k, 5], kf_R[k, 6], kf_R[k, 7], kf_R[k, 8])
    t_rw = (kf_t[k, 0], kf_t[k, 1], kf_t[k, 2])
    qi, ti = _pose(h_pose, i)
    qj, tj = _pose(h_pose, j)
    ux = (x - cam[2]) / cam[0]
    uy = (y - cam[3]) / cam[1]
    st, M0, dL = linearize_core(ux, uy, float(pol), qc, tc, qi, ti, qj, tj, alpha, scal[S_C],
                                logI[k], depth[k], R_rw, t_rw, kf_intr[k], scale,
                                int(cfg[CFG_DEPTH_ITERS]), cfg[CFG_FD_STEP], J)
    if st != OK:
        return st, 0.0, 0.0
    predict_core(P, cfg)
    bind_core(poses, times, P, h_t, h_pose, h_cov, i, j)
    w = apply_update(poses, scal, P, J, M0, cfg, delta, PJ)
    times[0] = t
    if cfg[CFG_WRITE_BACK] != 0.0 and w > 0.0:
        for side in range(2):
            slot = i if side == 0 else j
            q, tr = _pose(poses, 1 + side)
            _store(h_pose, slot, q, tr)
            for a in range(6):
                for b in range(6):
                    h_cov[slot, a, b] = P[6 + 6 * side + a, 6 + 6 * side + b]
    qc, tc = _pose(poses, 0)
    history_push(h_t, h_pose, h_cov, h_idx, t, qc, tc, P, 0, cfg[CFG_HISTORY_DT])
    return OK, M0, w


@njit(cache=True)
def run_filter(ev_x, ev_y, ev_t, ev_p, poses, times, scal, P, h_t, h_pose, h_cov, h_idx, last_t,
               cam, logI, depth, kf_R, kf_t, kf_intr, kf_pose, cfg, decimate,
               out_status, out_diag, traj_t, traj_pose):
    """Process an event batch in order.

    ``out_diag`` rows are (M0, w, C, pi, sigma); the trajectory buffers receive
    the current pose after every ``decimate``-th event and after the last one.
    Returns the number of trajectory rows written.
    """
    J = np.zeros(NSTATE)
    delta = np.zeros(NSTATE)
    PJ = np.zeros(NSTATE)
    n = ev_t.shape[0]
    rows = 0
    for e in range(n):
        st, M0, w = process_event(ev_x[e], ev_y[e], ev_t[e], ev_p[e], poses, times, scal, P,
                                  h_t, h_pose, h_cov, h_idx, last_t, cam, logI, depth, kf_R,
                                  kf_t, kf_intr, kf_pose, cfg, J, delta, PJ)
        out_status[e] = st
        pi_m, var = point_estimates(scal, cfg)
        out_diag[e, 0] = M0
        out_diag[e, 1] = w
        out_diag[e, 2] = scal[S_C]
        out_diag[e, 3] = pi_m
        out_diag[e, 4] = math.sqrt(var)
        if (e + 1) % decimate == 0 or e == n - 1:
            traj_t[rows] = ev_t[e]
            for a in range(7):
                traj_pose[rows, a] = poses[0, a]
            rows += 1
    return rows
