"""Command-line entry point: scene, simulate, track, evaluate and e2e runs.

Exit codes: 0 success, 2 parse or configuration error, 3 tracking
divergence, 4 acceptance failure.
"""

from __future__ import annotations

import argparse
import hashlib
import subprocess
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from . import io as evio
from .errors import ParseError
from .metrics import align_and_compare
from .photomap import PhotometricMap, load_map_dir, save_map_dir
from .scenes import SCENES, make_scene
from .se3 import Pose
from .sim import Trajectory, add_outliers, make_trajectory, outlier_seed, rate_for_fraction, simulate
from .tracker import Tracker

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_DIVERGED = 3
EXIT_ACCEPTANCE = 4


# --- helpers ----------------------------------------------------------------------


def bundled_configs() -> list[str]:
    root = resources.files("evtrack") / "configs"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".cfg"))


def load_config(source: str | None) -> tuple[evio.RunConfig, str]:
    """Config from a file path or the name of a bundled scenario; returns it with its source text."""
    if source is None:
        cfg = evio.RunConfig()
        return cfg, cfg.to_text()
    path = Path(source)
    if not path.exists():
        bundled = resources.files("evtrack") / "configs" / f"{source.removesuffix('.cfg')}.cfg"
        if not bundled.is_file():
            raise ParseError(f"no config file {source!r}; bundled scenarios: {', '.join(bundled_configs())}")
        return evio.parse_config(bundled.read_text(), source), bundled.read_text()
    text = path.read_text()
    return evio.parse_config(text, path), text


def _apply_overrides(cfg: evio.RunConfig, args) -> evio.RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "decimate", None) is not None:
        if args.decimate < 1:
            raise ParseError("--decimate must be >= 1")
        cfg.decimate = args.decimate
    return cfg


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def write_manifest(out: Path, cfg: evio.RunConfig, command: str, extra: dict | None = None) -> None:
    text = cfg.to_text()
    lines = [
        f"command = {command}",
        f"version = {version_string()}",
        f"config_sha256 = {hashlib.sha256(text.encode()).hexdigest()}",
        f"seed = {cfg.seed}",
    ]
    lines += [f"{k} = {v}" for k, v in (extra or {}).items()]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n\n# effective configuration\n" + text)


def scenario_map(cfg: evio.RunConfig, map_dir) -> PhotometricMap:
    if map_dir is not None:
        return load_map_dir(map_dir)
    return make_scene(cfg.scene, cfg.scene_seed)


def ground_truth(cfg: evio.RunConfig, pmap: PhotometricMap) -> Trajectory:
    params = cfg.motion_params()
    if cfg.trajectory == "orbit":
        params["target_depth"] = pmap.mean_scene_depth
    return make_trajectory(cfg.trajectory, cfg.duration, cfg.trajectory_dt, **params)


def simulate_events(cfg: evio.RunConfig, pmap: PhotometricMap, gt: Trajectory):
    cam = cfg.camera()
    params = cfg.sim_params(cam)
    if cfg.outlier_fraction > 0:
        if cfg.outlier_rate > 0:
            raise ParseError("set either outlier_rate or outlier_fraction, not both")
        genuine = simulate(gt, pmap, params)
        t0, t1 = float(gt.times[0]), float(gt.times[-1])
        rate = rate_for_fraction(len(genuine), t1 - t0, cfg.outlier_fraction)
        return add_outliers(genuine, rate, cam, t0, t1, outlier_seed(params))
    return simulate(gt, pmap, params)


def initial_pose(cfg: evio.RunConfig, pose: Pose, mean_depth: float) -> Pose:
    if cfg.init_offset_pct == 0.0:
        return pose
    shift = pose.rotation @ np.array([cfg.init_offset_pct / 100.0 * mean_depth, 0.0, 0.0])
    return Pose(pose.quat, pose.translation + shift)


def run_tracker(cfg: evio.RunConfig, pmap: PhotometricMap, events, pose0: Pose, t0: float):
    """Track ``events``; returns (trajectory including the initial sample, TrackResult)."""
    tracker = Tracker(pmap, cfg.camera(), pose0, cfg.tracker_config(), t0)
    result = tracker.process(events, cfg.decimate)
    init = tracker.initial_sample()
    traj = Trajectory(np.concatenate([init.times, result.trajectory.times]),
                      np.concatenate([init.quats, result.trajectory.quats]),
                      np.concatenate([init.trans, result.trajectory.trans]))
    return traj, result


def check_divergence(cfg: evio.RunConfig, traj: Trajectory, result) -> str | None:
    """Reason the run counts as diverged, or None."""
    if not (np.all(np.isfinite(traj.trans)) and np.all(np.isfinite(traj.quats))):
        return "non-finite pose estimate"
    m0 = np.abs(result.diagnostics[result.processed, 0])
    if m0.size >= 100:
        tail = np.median(m0[-max(100, m0.size // 10):])
        if tail > cfg.divergence_max_residual:
            return f"median |M0| {tail:.3g} over the final events exceeds {cfg.divergence_max_residual}"
    return None


def _print_track_summary(events, result) -> None:
    rate = len(events) / result.elapsed if result.elapsed > 0 else float("inf")
    print(f"processed {int(result.processed.sum())}/{len(events)} events in {result.elapsed:.2f} s "
          f"({rate:,.0f} events/s)")
    skips = result.skip_counts()
    print("skipped: " + (", ".join(f"{k}={v}" for k, v in skips.items()) if skips else "none"))


# --- commands -----------------------------------------------------------------------


def cmd_scene(args) -> int:
    pmap = make_scene(args.name, args.seed)
    out = Path(args.out)
    save_map_dir(pmap, out)
    print(f"wrote {args.name} map to {out} (mean scene depth {pmap.mean_scene_depth:.4f} m)")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg, _ = load_config(args.config)
    cfg = _apply_overrides(cfg, args)
    pmap = scenario_map(cfg, args.map)
    gt = ground_truth(cfg, pmap)
    events = simulate_events(cfg, pmap, gt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evio.write_events(out / "events.txt", events)
    evio.write_trajectory(out / "groundtruth.txt", gt)
    write_manifest(out, cfg, "simulate", {"events": len(events), "outliers": int(events.outlier.sum()),
                                          "mean_scene_depth": repr(pmap.mean_scene_depth)})
    print(f"wrote {len(events)} events ({int(events.outlier.sum())} outliers) to {out}")
    return EXIT_OK


def cmd_track(args) -> int:
    cfg, _ = load_config(args.config)
    cfg = _apply_overrides(cfg, args)
    pmap = scenario_map(cfg, args.map)
    events = evio.read_events(args.events, strict=args.strict_io, max_events=args.max_events)
    init = evio.read_trajectory(args.init)
    if len(init) == 0:
        raise ParseError("initial pose file is empty", args.init)
    t0, pose = init[0]
    pose0 = initial_pose(cfg, pose, pmap.mean_scene_depth)
    traj, result = run_tracker(cfg, pmap, events, pose0, t0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evio.write_trajectory(out / "trajectory.txt", traj)
    evio.write_diagnostics(out / "diagnostics.csv", events.t, result.diagnostics, result.status)
    write_manifest(out, cfg, "track", {"events": len(events)})
    _print_track_summary(events, result)
    reason = check_divergence(cfg, traj, result)
    if reason:
        print(f"tracking diverged: {reason}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_evaluate(args) -> int:
    est = evio.read_trajectory(args.estimate)
    gt = evio.read_trajectory(args.groundtruth)
    err = align_and_compare(est, gt, args.mean_depth, args.uniform_dt)
    if args.out:
        err.write_csv(args.out)
    print(err.table())
    return EXIT_OK


def cmd_e2e(args) -> int:
    cfg, _ = load_config(args.config)
    cfg = _apply_overrides(cfg, args)
    pmap = make_scene(cfg.scene, cfg.scene_seed)
    gt = ground_truth(cfg, pmap)
    events = simulate_events(cfg, pmap, gt)
    if args.max_events is not None:
        events = events[: args.max_events]
    t0, pose = gt[0]
    pose0 = initial_pose(cfg, pose, pmap.mean_scene_depth)
    traj, result = run_tracker(cfg, pmap, events, pose0, t0)
    err = align_and_compare(traj, gt, pmap.mean_scene_depth, cfg.uniform_dt)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        evio.write_events(out / "events.txt", events)
        evio.write_trajectory(out / "groundtruth.txt", gt)
        evio.write_trajectory(out / "trajectory.txt", traj)
        evio.write_diagnostics(out / "diagnostics.csv", events.t, result.diagnostics, result.status)
        err.write_csv(out / "errors.csv")
        write_manifest(out, cfg, "e2e", {"events": len(events)})
    _print_track_summary(events, result)
    print(err.table())
    reason = check_divergence(cfg, traj, result)
    if reason:
        print(f"tracking diverged: {reason}", file=sys.stderr)
        return EXIT_DIVERGED
    pos, rot = err.position_percent.rms, err.orientation.rms
    ok = pos <= cfg.max_rms_position_pct and rot <= cfg.max_rms_orientation_deg
    verdict = "PASS" if ok else "FAIL"
    print(f"{verdict}: RMS position {pos:.3f}% (limit {cfg.max_rms_position_pct}%), "
          f"RMS orientation {rot:.3f} deg (limit {cfg.max_rms_orientation_deg} deg)")
    return EXIT_OK if ok else EXIT_ACCEPTANCE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evtrack", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, tracking=False):
        p.add_argument("--config", help="config file or bundled scenario name (%s)" % ", ".join(bundled_configs()))
        p.add_argument("--seed", type=int, help="simulator seed (overrides the config)")
        if tracking:
            p.add_argument("--decimate", type=int, help="write the trajectory every N events")
            p.add_argument("--max-events", type=int, help="process at most N events")

    p = sub.add_parser("scene", help="write a bundled photometric map to a directory")
    p.add_argument("name", choices=SCENES)
    p.add_argument("out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_scene)

    p = sub.add_parser("simulate", help="simulate events and ground truth for a scenario")
    common(p)
    p.add_argument("--map", help="map directory (default: the config's bundled scene)")
    p.add_argument("out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("track", help="track a camera through an event file")
    common(p, tracking=True)
    p.add_argument("--map", help="map directory (default: the config's bundled scene)")
    p.add_argument("--events", required=True)
    p.add_argument("--init", required=True, help="trajectory file; its first pose initializes the tracker")
    p.add_argument("--strict-io", action=argparse.BooleanOptionalAction, default=True,
                   help="reject non-monotone event timestamps (default) or stable-sort them")
    p.add_argument("out")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("evaluate", help="compare an estimated trajectory with ground truth")
    p.add_argument("estimate")
    p.add_argument("groundtruth")
    p.add_argument("--mean-depth", type=float, required=True)
    p.add_argument("--uniform-dt", type=float, help="resample the estimate on a uniform time grid")
    p.add_argument("--out", help="per-sample error CSV")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("e2e", help="simulate, track and evaluate; nonzero exit on failure")
    common(p, tracking=True)
    p.add_argument("--out", help="directory for all outputs")
    p.set_defaults(func=cmd_e2e)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
