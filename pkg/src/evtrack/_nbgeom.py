"""Allocation-free numba kernels for rotations, poses, image sampling and event transfer.

Quaternions are 4-tuples (x, y, z, w); rotation matrices are row-major 9-tuples.
Every fallible kernel returns an integer status first; the public wrappers turn
non-zero statuses into exceptions.
"""

import math

import numpy as np
from numba import njit

OK = 0
OUT_OF_BOUNDS = 1
INVALID_DEPTH = 2
BEHIND_CAMERA = 3
NO_PRIOR_EVENT = 4
NO_PRIOR_POSE = 5
NON_FINITE = 6

STATUS_NAMES = (
    "ok",
    "out_of_bounds",
    "invalid_depth",
    "behind_camera",
    "no_prior_event",
    "no_prior_pose",
    "non_finite",
)

_SMALL_ANGLE = 1e-8


@njit(cache=True, inline="always")
def qmul(a, b):
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return (
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    )


@njit(cache=True, inline="always")
def qconj(q):
    return (-q[0], -q[1], -q[2], q[3])


@njit(cache=True)
def qnormalize(q):
    n = math.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    if q[3] < 0.0:
        n = -n
    return (q[0] / n, q[1] / n, q[2] / n, q[3] / n)


@njit(cache=True)
def qexp(v):
    """Unit quaternion of the rotation vector ``v`` (radians)."""
    th2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
    th = math.sqrt(th2)
    if th < _SMALL_ANGLE:
        s = 0.5 - th2 / 48.0
        c = 1.0 - th2 / 8.0
    else:
        s = math.sin(0.5 * th) / th
        c = math.cos(0.5 * th)
    return (s * v[0], s * v[1], s * v[2], c)


@njit(cache=True)
def qlog(q):
    """Rotation vector of ``q``, with angle in [0, pi]."""
    x, y, z, w = q
    if w < 0.0:
        x, y, z, w = -x, -y, -z, -w
    n = math.sqrt(x * x + y * y + z * z)
    if n < _SMALL_ANGLE:
        # atan2(n, w) / n ~ 1/w - n^2/(3 w^3)
        f = 2.0 / w * (1.0 - n * n / (3.0 * w * w))
    else:
        f = 2.0 * math.atan2(n, w) / n
    return (f * x, f * y, f * z)


@njit(cache=True)
def qmatrix(q):
    x, y, z, w = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return (
        1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy),
        2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx),
        2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy),
    )


@njit(cache=True, inline="always")
def mv(R, v):
    return (
        R[0] * v[0] + R[1] * v[1] + R[2] * v[2],
        R[3] * v[0] + R[4] * v[1] + R[5] * v[2],
        R[6] * v[0] + R[7] * v[1] + R[8] * v[2],
    )


@njit(cache=True, inline="always")
def mtv(R, v):
    return (
        R[0] * v[0] + R[3] * v[1] + R[6] * v[2],
        R[1] * v[0] + R[4] * v[1] + R[7] * v[2],
        R[2] * v[0] + R[5] * v[1] + R[8] * v[2],
    )


@njit(cache=True)
def mm(A, B):
    return (
        A[0] * B[0] + A[1] * B[3] + A[2] * B[6],
        A[0] * B[1] + A[1] * B[4] + A[2] * B[7],
        A[0] * B[2] + A[1] * B[5] + A[2] * B[8],
        A[3] * B[0] + A[4] * B[3] + A[5] * B[6],
        A[3] * B[1] + A[4] * B[4] + A[5] * B[7],
        A[3] * B[2] + A[4] * B[5] + A[5] * B[8],
        A[6] * B[0] + A[7] * B[3] + A[8] * B[6],
        A[6] * B[1] + A[7] * B[4] + A[8] * B[7],
        A[6] * B[2] + A[7] * B[5] + A[8] * B[8],
    )


@njit(cache=True)
def interp_pose(qi, ti, qj, tj, alpha):
    """Linear in translation, constant angular velocity in rotation."""
    rel = qlog(qmul(qconj(qi), qj))
    q = qnormalize(qmul(qi, qexp((alpha * rel[0], alpha * rel[1], alpha * rel[2]))))
    b = 1.0 - alpha
    t = (b * ti[0] + alpha * tj[0], b * ti[1] + alpha * tj[1], b * ti[2] + alpha * tj[2])
    return q, t


@njit(cache=True)
def perturb_pose(q, t, k, h, scale):
    """Apply step ``h`` along normalized coordinate ``k`` (0-2 translation, 3-5 rotation)."""
    if k < 3:
        if k == 0:
            return q, (t[0] + h * scale, t[1], t[2])
        if k == 1:
            return q, (t[0], t[1] + h * scale, t[2])
        return q, (t[0], t[1], t[2] + h * scale)
    if k == 3:
        d = qexp((h, 0.0, 0.0))
    elif k == 4:
        d = qexp((0.0, h, 0.0))
    else:
        d = qexp((0.0, 0.0, h))
    return qmul(q, d), t


@njit(cache=True)
def retract_pose(q, t, d0, d1, d2, d3, d4, d5, scale):
    """Compose a full 6-vector increment in normalized coordinates."""
    qn = qnormalize(qmul(q, qexp((d3, d4, d5))))
    return qn, (t[0] + d0 * scale, t[1] + d1 * scale, t[2] + d2 * scale)


@njit(cache=True)
def relative_to_ref(q_wc, t_wc, R_rw, t_rw):
    """Reference-from-camera transform for a world-from-camera pose."""
    R_wc = qmatrix(q_wc)
    R_rc = mm(R_rw, R_wc)
    a = mv(R_rw, t_wc)
    return R_rc, (a[0] + t_rw[0], a[1] + t_rw[1], a[2] + t_rw[2])


@njit(cache=True)
def sample_bilinear(img, px, py):
    h, w = img.shape
    if not (px >= 1.0 and px <= w - 2.0 and py >= 1.0 and py <= h - 2.0):
        return OUT_OF_BOUNDS, 0.0
    x0 = int(px)
    y0 = int(py)
    fx = px - x0
    fy = py - y0
    v00 = img[y0, x0]
    v01 = img[y0, x0 + 1]
    v10 = img[y0 + 1, x0]
    v11 = img[y0 + 1, x0 + 1]
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    return OK, top + fy * (bot - top)


@njit(cache=True)
def sample_depth_bilinear(depth, px, py):
    h, w = depth.shape
    if not (px >= 1.0 and px <= w - 2.0 and py >= 1.0 and py <= h - 2.0):
        return OUT_OF_BOUNDS, 0.0
    x0 = int(px)
    y0 = int(py)
    v00 = depth[y0, x0]
    v01 = depth[y0, x0 + 1]
    v10 = depth[y0 + 1, x0]
    v11 = depth[y0 + 1, x0 + 1]
    # NaN fails every comparison, so non-finite holes are caught here too
    if not (v00 > 0.0 and v01 > 0.0 and v10 > 0.0 and v11 > 0.0):
        return INVALID_DEPTH, 0.0
    if not (v00 < np.inf and v01 < np.inf and v10 < np.inf and v11 < np.inf):
        return INVALID_DEPTH, 0.0
    fx = px - x0
    fy = py - y0
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    return OK, top + fy * (bot - top)


@njit(cache=True)
def transfer(ux, uy, R, t, Z):
    """Map calibrated point ``(ux, uy)`` at depth ``Z`` through ``(R, t)`` and reproject."""
    if not Z > 0.0:
        return BEHIND_CAMERA, 0.0, 0.0
    p = mv(R, (ux * Z, uy * Z, Z))
    zr = p[2] + t[2]
    if not zr > 0.0:
        return BEHIND_CAMERA, 0.0, 0.0
    return OK, (p[0] + t[0]) / zr, (p[1] + t[1]) / zr


@njit(cache=True)
def lookup_depth(ux, uy, R_rc, t_rc, depth, intr, z0, n_iter):
    """Fixed-point search for the event-frame depth of the map point seen along ``(ux, uy)``."""
    fx, fy, cx, cy = intr[0], intr[1], intr[2], intr[3]
    Z = z0
    for _ in range(n_iter):
        st, vx, vy = transfer(ux, uy, R_rc, t_rc, Z)
        if st != OK:
            return st, 0.0
        st, d = sample_depth_bilinear(depth, fx * vx + cx, fy * vy + cy)
        if st != OK:
            return st, 0.0
        # map point in the reference frame, pulled back to the event camera
        pc = mtv(R_rc, (vx * d - t_rc[0], vy * d - t_rc[1], d - t_rc[2]))
        Z = pc[2]
        if not Z > 0.0:
            return BEHIND_CAMERA, 0.0
    return OK, Z


@njit(cache=True)
def eval_log_intensity(ux, uy, q_wc, t_wc, logI, depth, R_rw, t_rw, intr, z0, n_iter):
    """Log intensity the reference image predicts for ray ``(ux, uy)`` of a camera at ``(q_wc, t_wc)``."""
    R_rc, t_rc = relative_to_ref(q_wc, t_wc, R_rw, t_rw)
    st, Z = lookup_depth(ux, uy, R_rc, t_rc, depth, intr, z0, n_iter)
    if st != OK:
        return st, 0.0
    st, vx, vy = transfer(ux, uy, R_rc, t_rc, Z)
    if st != OK:
        return st, 0.0
    return sample_bilinear(logI, intr[0] * vx + intr[2], intr[1] * vy + intr[3])


@njit(cache=True)
def select_keyframe(q_wc, t_wc, kf_pose, scale):
    """Index of the keyframe minimizing translation/scale + geodesic angle."""
    best = 0
    best_score = np.inf
    for k in range(kf_pose.shape[0]):
        dx = t_wc[0] - kf_pose[k, 4]
        dy = t_wc[1] - kf_pose[k, 5]
        dz = t_wc[2] - kf_pose[k, 6]
        rel = qmul(qconj((kf_pose[k, 0], kf_pose[k, 1], kf_pose[k, 2], kf_pose[k, 3])), q_wc)
        r = qlog(rel)
        score = math.sqrt(dx * dx + dy * dy + dz * dz) / scale + math.sqrt(
            r[0] * r[0] + r[1] * r[1] + r[2] * r[2]
        )
        if score < best_score:
            best_score = score
            best = k
    return best


@njit(cache=True)
def render(q_wc, t_wc, cam, width, height, logI, depth, kf_R, kf_t, kf_intr, kf_pose, scale, n_iter, out):
    """Render the log-intensity image of a camera; unresolvable pixels become NaN.

    Returns the number of resolved pixels.
    """
    k = select_keyframe(q_wc, t_wc, kf_pose, scale)
    R_rw = (kf_R[k, 0], kf_R[k, 1], kf_R[k, 2], kf_R[k, 3], kf_R[k, 4],
            kf_R[k, 5], kf_R[k, 6], kf_R[k, 7], kf_R[k, 8])
    t_rw = (kf_t[k, 0], kf_t[k, 1], kf_t[k, 2])
    intr = kf_intr[k]
    fx, fy, cx, cy = cam[0], cam[1], cam[2], cam[3]
    good = 0
    for y in range(height):
        uy = (y - cy) / fy
        for x in range(width):
            ux = (x - cx) / fx
            st, v = eval_log_intensity(ux, uy, q_wc, t_wc, logI[k], depth[k], R_rw, t_rw, intr, scale, n_iter)
            if st == OK:
                out[y, x] = v
                good += 1
            else:
                out[y, x] = np.nan
    return good
