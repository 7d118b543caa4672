"""Trajectory error metrics against ground truth in the shared map frame."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoOverlap
from .se3 import geodesic_angles
from .sim import Trajectory


@dataclass(frozen=True)
class Summary:
    rms: float
    mean: float
    std: float  # population (1/N)

    @classmethod
    def of(cls, values: np.ndarray) -> Summary:
        v = np.asarray(values, dtype=float)
        if v.size == 0:
            return cls(0.0, 0.0, 0.0)
        return cls(float(np.sqrt(np.mean(v * v))), float(np.mean(v)), float(np.std(v)))


@dataclass(frozen=True)
class TrajectoryError:
    times: np.ndarray
    position_m: np.ndarray
    position_pct: np.ndarray
    orientation_deg: np.ndarray
    mean_depth: float

    def __len__(self):
        return len(self.times)

    @property
    def position(self) -> Summary:
        return Summary.of(self.position_m)

    @property
    def position_percent(self) -> Summary:
        return Summary.of(self.position_pct)

    @property
    def orientation(self) -> Summary:
        return Summary.of(self.orientation_deg)

    def table(self) -> str:
        rows = [("position [m]", self.position), ("position [%]", self.position_percent),
                ("orientation [deg]", self.orientation)]
        lines = [f"{'metric':<20}{'RMS':>12}{'mean':>12}{'std':>12}"]
        lines += [f"{name:<20}{s.rms:>12.6f}{s.mean:>12.6f}{s.std:>12.6f}" for name, s in rows]
        lines.append(f"samples: {len(self)} (population statistics)")
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("# per-sample errors; summaries use population (1/N) statistics\n")
            f.write("t,position_m,position_pct,orientation_deg\n")
            for row in zip(self.times, self.position_m, self.position_pct, self.orientation_deg):
                f.write("%.9f,%.9g,%.9g,%.9g\n" % row)
            for tag in ("rms", "mean", "std"):
                vals = [getattr(s, tag) for s in (self.position, self.position_percent, self.orientation)]
                f.write("%s,%.9g,%.9g,%.9g\n" % (tag.upper(), *vals))


def align_and_compare(est: Trajectory, gt: Trajectory, mean_depth: float,
                      uniform_dt: float | None = None) -> TrajectoryError:
    """Errors of ``est`` against ``gt`` interpolated at the estimate timestamps.

    No alignment transform is applied. With ``uniform_dt`` the estimate is
    first resampled on a uniform time grid.
    """
    if not mean_depth > 0:
        raise ValueError("mean_depth must be positive")
    if len(est) == 0 or len(gt) == 0:
        raise NoOverlap("empty trajectory")
    lo, hi = max(est.times[0], gt.times[0]), min(est.times[-1], gt.times[-1])
    if lo > hi:
        raise NoOverlap(f"estimate [{est.times[0]}, {est.times[-1]}] and ground truth "
                        f"[{gt.times[0]}, {gt.times[-1]}] do not overlap")
    if uniform_dt is not None:
        est = est.sample(np.arange(lo, hi + 0.5 * uniform_dt, uniform_dt))
    inside = (est.times >= gt.times[0]) & (est.times <= gt.times[-1])
    t = est.times[inside]
    ref = gt.sample(t)
    pos = np.linalg.norm(est.trans[inside] - ref.trans, axis=1)
    ang = geodesic_angles(est.quats[inside], ref.quats)
    return TrajectoryError(t, pos, pos / mean_depth * 100.0, ang, float(mean_depth))
