"""Acceptance criteria. Each test prints one PASS/FAIL line with its measured values.

Tolerances are pinned here and never relaxed to make a run pass.
"""

from __future__ import annotations

import contextlib
import io
import math
import re
import time

import numpy as np
import pytest
from scipy import integrate
from scipy.spatial.transform import Rotation
from scipy.stats import mannwhitneyu, norm

from evtrack import _nbfilter as nbf
from evtrack.cli import EXIT_OK, ground_truth, load_config, main, simulate_events
from evtrack.errors import MeasurementUnavailable
from evtrack.measurement import (
    LinearizedMeasurement,
    MixtureParams,
    ReducedState,
    exp_family_terms,
    likelihood_from_terms,
    linearize,
    measurement,
    mixture_density,
)
from evtrack.scenes import make_scene
from evtrack.se3 import Pose
from evtrack.sim import Event, SimParams, TimestampMap, simulate
from evtrack.tracker import MotionModelParams, TrackerConfig

from conftest import ACCEPTANCE_LINES, SMALL, linear_map
from test_sim import contrast_errors, x_translation

# pinned thresholds
POS_PCT_1, ROT_DEG_1, WALL_S_1 = 3.0, 2.5, 60.0
POS_PCT_2, ROT_DEG_2 = 3.5, 2.5
DEGRADE_3, P_VALUE_3, MIN_EVENTS_3 = 2.0, 0.01, 10_000
TOL_4 = 1e-12
REL_J_5, REL_C_5 = 1e-3, 1e-5
QUAD_6, REL_6 = 1e-6, 1e-10
CONSISTENCY_7 = 1.5
RATE_8, MIN_EVENTS_8 = 30_000.0, 1_000_000
SCENARIOS = ("planar_rocks", "boxes", "planar_rocks_outliers")
OUTPUTS = ("events.txt", "groundtruth.txt", "trajectory.txt", "diagnostics.csv", "errors.csv", "manifest.txt")

pytestmark = pytest.mark.slow


def record(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def read_errors(path):
    rows = {ln.split(",")[0]: [float(v) for v in ln.split(",")[1:]] for ln in path.read_text().splitlines()[-3:]}
    return rows["RMS"]  # position_m, position_pct, orientation_deg


def read_diagnostics(path):
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """Each bundled scenario run twice through ``evtrack e2e``: {(name, k): (exit, stdout, wall, dir)}."""
    out = {}
    for name in SCENARIOS:
        for k in range(2):
            d = tmp_path_factory.mktemp(f"{name}_{k}")
            buf = io.StringIO()
            t0 = time.perf_counter()
            with contextlib.redirect_stdout(buf):
                code = main(["e2e", "--config", name, "--out", str(d)])
            out[name, k] = (code, buf.getvalue(), time.perf_counter() - t0, d)
    return out


def test_criterion_1_planar_accuracy(runs):
    code, _, wall, d = runs["planar_rocks", 0]
    _, pos, rot = read_errors(d / "errors.csv")
    ok = code == EXIT_OK and pos <= POS_PCT_1 and rot <= ROT_DEG_1 and wall < WALL_S_1
    record(1, ok, f"planar_rocks RMS position {pos:.3f}% (<= {POS_PCT_1}), orientation {rot:.3f} deg "
                  f"(<= {ROT_DEG_1}), wall {wall:.1f} s (< {WALL_S_1}), exit {code}")


def test_criterion_2_depth_variation(runs):
    code, _, _, d = runs["boxes", 0]
    _, pos, rot = read_errors(d / "errors.csv")
    ok = code == EXIT_OK and pos <= POS_PCT_2 and rot <= ROT_DEG_2
    record(2, ok, f"boxes RMS position {pos:.3f}% (<= {POS_PCT_2}), orientation {rot:.3f} deg (<= {ROT_DEG_2}), "
                  f"exit {code}")


def test_criterion_3_outlier_robustness(runs):
    _, pos_clean, _ = read_errors(runs["planar_rocks", 0][3] / "errors.csv")
    _, _, _, d = runs["planar_rocks_outliers", 0]
    _, pos, _ = read_errors(d / "errors.csv")
    # regenerate the stream to recover which events were injected outliers
    cfg, _ = load_config("planar_rocks_outliers")
    pmap = make_scene(cfg.scene, cfg.scene_seed)
    events = simulate_events(cfg, pmap, ground_truth(cfg, pmap))
    diag = read_diagnostics(d / "diagnostics.csv")
    assert len(diag) == len(events) and np.array_equal(np.round(diag[:, 0], 9), np.round(events.t, 9))
    used = diag[:, 6] == nbf.OK
    w_out, w_in = diag[used & events.outlier, 2], diag[used & ~events.outlier, 2]
    p = mannwhitneyu(w_out, w_in, alternative="less").pvalue
    ratio = pos / pos_clean
    weights_ok = len(w_out) >= MIN_EVENTS_3 and len(w_in) >= MIN_EVENTS_3 and w_out.mean() < w_in.mean() \
        and p < P_VALUE_3
    record(3, ratio < DEGRADE_3 and weights_ok,
           f"RMS position {pos:.3f}% vs {pos_clean:.3f}% clean, ratio {ratio:.2f} (< {DEGRADE_3}); "
           f"mean w outliers {w_out.mean():.3f} (n={len(w_out)}) vs genuine {w_in.mean():.3f} (n={len(w_in)}), "
           f"Mann-Whitney p={p:.2g} (< {P_VALUE_3})")


def test_criterion_4_unit_weight_matches_textbook_ekf():
    # scalar toy: the threshold coordinate is the only state, h(x) = x + 0.5 sin(2x)
    def h(x):
        return x + 0.5 * math.sin(2 * x)

    def dh(x):
        return 1 + math.cos(2 * x)

    sigma, q, x_true = 0.1, 1e-3, 0.7
    cfg = TrackerConfig(pi_fixed=1.0, sigma_fixed=sigma, motion=MotionModelParams(0.0, 0.03, q))
    kcfg = cfg.kernel_config(1.0)
    poses = np.tile([0, 0, 0, 1.0, 0, 0, 0], (3, 1))
    scal = np.array([0.4, 1.0, 1.0, 3.0, 0.08])
    P = np.zeros((19, 19))
    P[18, 18] = 0.5
    x, Px = 0.4, 0.5  # textbook filter
    z = h(x_true) + np.random.default_rng(7).normal(0, sigma, 200)
    worst, weights = 0.0, set()
    for zk in z:
        nbf.predict_core(P, kcfg)
        J = np.zeros(19)
        J[18] = dh(scal[0])
        weights.add(nbf.apply_update(poses, scal, P, J, h(scal[0]) - zk, kcfg, np.zeros(19), np.zeros(19)))
        Px = Px + q**2
        H = dh(x)
        K = Px * H / (H * Px * H + sigma**2)
        x = x + K * (zk - h(x))
        Px = (1 - K * H) * Px
        worst = max(worst, abs(scal[0] - x), abs(P[18, 18] - Px))
    untouched = np.count_nonzero(P[:18]) == 0 and np.all(poses == poses[0])
    record(4, worst < TOL_4 and weights == {1.0} and untouched,
           f"200 updates, max |difference| {worst:.2e} (< {TOL_4:g}), final x {x:.4f} (true {x_true})")


def _nudge(pose, k, h, scale):
    if k < 3:
        d = np.zeros(3)
        d[k] = h * scale
        return Pose(pose.quat, pose.translation + d)
    r = np.zeros(3)
    r[k - 3] = h
    return Pose((Rotation.from_quat(pose.quat) * Rotation.from_rotvec(r)).as_quat(), pose.translation)


def test_criterion_5_jacobian_consistency():
    rng = np.random.default_rng(0)
    worst_J = worst_C = 0.0
    n = 0
    while n < 100:
        # affine log intensity and depth: bilinear sampling is exact, so M is smooth
        pmap = linear_map(gx=rng.uniform(-0.05, 0.05), gy=rng.uniform(-0.05, 0.05), depth=0.6,
                          dzx=rng.uniform(-5e-4, 5e-4), dzy=rng.uniform(-5e-4, 5e-4))
        sc = pmap.mean_scene_depth
        poses = [Pose.from_rotvec(rng.normal(0, 0.03, 3), rng.normal(0, 0.03 * sc, 3)) for _ in range(3)]
        C = rng.uniform(0.1, 0.5)
        x, y = int(rng.integers(0, SMALL.width)), int(rng.integers(0, SMALL.height))
        ts = TimestampMap(SMALL.width, SMALL.height)
        ts.record(x, y, rng.uniform(0.05, 0.95))
        ev = Event(x, y, 1.0, int(rng.choice([-1, 1])))

        def M(ps, c):
            return measurement(ev, ReducedState(*ps, 0.0, 1.0, c), pmap, ts, SMALL)

        try:
            lin = linearize(ev, ReducedState(*poses, 0.0, 1.0, C), pmap, ts, SMALL, step=1e-4)
        except MeasurementUnavailable:
            continue
        n += 1
        h = 0.5e-4  # half the linearization step
        for slot in range(3):
            for k in range(6):
                plus, minus = list(poses), list(poses)
                plus[slot] = _nudge(poses[slot], k, h, sc)
                minus[slot] = _nudge(poses[slot], k, -h, sc)
                fd = (M(plus, C) - M(minus, C)) / (2 * h)
                Jk = lin.J[6 * slot + k]
                worst_J = max(worst_J, abs(fd - Jk) / abs(Jk))
        hc = 1e-6 * C
        fd = (M(poses, C + hc) - M(poses, C - hc)) / (2 * hc)
        worst_C = max(worst_C, abs(fd - lin.J[18]) / abs(lin.J[18]))
    record(5, worst_J < REL_J_5 and worst_C < REL_C_5,
           f"100 fixtures, worst pose-entry relative error {worst_J:.2e} (< {REL_J_5:g}), "
           f"dM/dC {worst_C:.2e} (< {REL_C_5:g})")


def test_criterion_6_likelihood_identities():
    rng = np.random.default_rng(6)
    worst_q = 0.0
    for _ in range(20):
        pi_m, sigma = rng.uniform(0.05, 1.0), rng.uniform(0.05, 1.0)
        lo, hi = -rng.uniform(1, 6), rng.uniform(1, 6)
        mp = MixtureParams(pi_m, sigma, lo, hi)
        val, _ = integrate.quad(lambda m: mixture_density(m, mp), lo, hi, points=[0.0], epsabs=1e-12,
                                epsrel=1e-12, limit=200)
        expect = pi_m * (norm.cdf(hi / sigma) - norm.cdf(lo / sigma)) + (1 - pi_m)
        worst_q = max(worst_q, abs(val - expect))
    worst_r = 0.0
    for _ in range(1000):
        pi_m, sigma = rng.uniform(0.01, 0.99), rng.uniform(0.05, 1.0)
        lo, hi = -rng.uniform(1, 6), rng.uniform(1, 6)
        mp = MixtureParams(pi_m, sigma, lo, hi)
        J, ds = rng.normal(0, 1, 19), rng.normal(0, 0.05, 19)
        M0 = rng.uniform(lo, hi) - J @ ds
        got = likelihood_from_terms(exp_family_terms(LinearizedMeasurement(M0, J, 0.0), mp), ds, pi_m, sigma)
        expect = mixture_density(M0 + J @ ds, mp)
        worst_r = max(worst_r, abs(got - expect) / expect)
    record(6, worst_q < QUAD_6 and worst_r < REL_6,
           f"quadrature max error {worst_q:.2e} (< {QUAD_6:g}), "
           f"reconstruction max relative error {worst_r:.2e} over 1000 draws (< {REL_6:g})")


def test_criterion_7_simulator_oracle(rocks, short_run):
    gx, Z, d, C = 0.05, 0.6, 0.12, 0.15
    expect = math.floor(gx * 100.0 * d / Z / C)  # reference fx = 100
    events = simulate(x_translation(d, 0.5), linear_map(gx=gx, depth=Z), SimParams(SMALL, C, -C, rng_seed=1))
    counts = np.zeros((SMALL.height, SMALL.width), dtype=int)
    np.add.at(counts, (events.y, events.x), 1)
    ramp_ok = np.all(np.abs(counts - expect) <= 1) and np.all(events.p == 1)
    traj, ev, params = short_run
    ratios = contrast_errors(ev, rocks, params.camera, traj)
    held = np.mean(ratios <= CONSISTENCY_7)
    record(7, bool(ramp_ok) and held == 1.0,
           f"ramp counts {counts.min()}..{counts.max()} vs floor(dL/C) = {expect} +/- 1; "
           f"contrast consistency holds for {100 * held:.2f}% of {len(ratios)} events "
           f"(worst ratio {ratios.max():.3f} <= {CONSISTENCY_7})")


def test_criterion_8_throughput(runs):
    _, stdout, _, _ = runs["planar_rocks", 0]
    m = re.search(r"processed (\d+)/(\d+) events in ([\d.]+) s \(([\d,]+) events/s\)", stdout)
    n_events, rate = int(m.group(2)), float(m.group(4).replace(",", ""))
    record(8, n_events >= MIN_EVENTS_8 and rate >= RATE_8,
           f"{rate:,.0f} events/s (>= {RATE_8:,.0f}) over {n_events:,} events (>= {MIN_EVENTS_8:,}), single thread")


def test_criterion_9_determinism(runs):
    differ = [f"{name}/{f}" for name in SCENARIOS for f in OUTPUTS
              if (runs[name, 0][3] / f).read_bytes() != (runs[name, 1][3] / f).read_bytes()]
    codes = {name: (runs[name, 0][0], runs[name, 1][0]) for name in SCENARIOS}
    same_codes = all(a == b for a, b in codes.values())
    record(9, not differ and same_codes,
           f"{len(SCENARIOS) * len(OUTPUTS)} output files compared across repeated runs, "
           f"{len(differ)} differ{': ' + ', '.join(differ) if differ else ''}")
