"""Relative odometry metrics in the style of the KITTI devkit, plus trajectory export."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .flowio import write_poses
from .geometry import invert_pose, rotation_angle

LENGTHS = tuple(range(100, 801, 100))
SPEED_BIN_KMH = 10.0


@dataclass(frozen=True)
class SegmentError:
    first: int
    last: int
    length: int  # nominal length cell, m
    trans: float  # fraction of travelled distance
    rot: float  # rad per m
    speed: float  # km/h


@dataclass
class Cell:
    trans_pct: float
    rot_degpm: float
    count: int


def _cells(errors: Iterable[SegmentError], key) -> dict:
    groups: dict = defaultdict(list)
    for e in errors:
        groups[key(e)].append(e)
    return {
        k: Cell(100.0 * float(np.mean([e.trans for e in g])), math.degrees(float(np.mean([e.rot for e in g]))), len(g))
        for k, g in sorted(groups.items())
    }


@dataclass
class EvalReport:
    errors: list[SegmentError] = field(default_factory=list)
    too_short: bool = False

    @property
    def by_length(self) -> dict[int, Cell]:
        return _cells(self.errors, lambda e: e.length)

    @property
    def by_speed(self) -> dict[float, Cell]:
        return _cells(self.errors, lambda e: SPEED_BIN_KMH * math.floor(e.speed / SPEED_BIN_KMH))

    @property
    def overall(self) -> Cell:
        if not self.errors:
            return Cell(float("nan"), float("nan"), 0)
        return _cells(self.errors, lambda e: 0)[0]

    def rows(self) -> list[tuple[str, str, float, float, int]]:
        out = [("length", str(k), c.trans_pct, c.rot_degpm, c.count) for k, c in self.by_length.items()]
        out += [("speed", f"{k:g}", c.trans_pct, c.rot_degpm, c.count) for k, c in self.by_speed.items()]
        o = self.overall
        out.append(("overall", "all", o.trans_pct, o.rot_degpm, o.count))
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["kind", "key", "trans_pct", "rot_degpm", "count"])
            for kind, key, t, r, c in self.rows():
                w.writerow([kind, key, f"{t:.10g}", f"{r:.10g}", c])


def path_distances(poses: Sequence[np.ndarray]) -> np.ndarray:
    steps = [np.linalg.norm(poses[i][:3, 3] - poses[i - 1][:3, 3]) for i in range(1, len(poses))]
    return np.concatenate([[0.0], np.cumsum(steps)])


def trajectory_errors(estimated: Sequence[np.ndarray], ground_truth: Sequence[np.ndarray], frame_rate: float = 10.0,
                      lengths: Sequence[int] = LENGTHS, step: int = 1) -> EvalReport:
    """Translational / rotational drift over every sub-sequence of each length.

    A sub-sequence starting at frame ``i`` ends at the first frame whose
    ground-truth path distance from ``i`` exceeds the nominal length; errors
    are normalised by that ground-truth distance.  Speed is the mean
    ground-truth speed over the sub-sequence.
    """
    if len(estimated) != len(ground_truth):
        raise ValueError(f"estimated trajectory has {len(estimated)} poses, ground truth {len(ground_truth)}")
    if frame_rate <= 0:
        raise ValueError("frame rate must be positive")
    est = [np.asarray(T, dtype=np.float64) for T in estimated]
    gt = [np.asarray(T, dtype=np.float64) for T in ground_truth]
    dist = path_distances(gt) if gt else np.zeros(0)
    report = EvalReport()
    if not len(dist) or dist[-1] <= min(lengths):
        report.too_short = True
        return report
    for first in range(0, len(gt), step):
        for L in lengths:
            last = int(np.searchsorted(dist, dist[first] + L, side="right"))
            if last >= len(gt):
                continue
            d = dist[last] - dist[first]
            delta_gt = invert_pose(gt[first]) @ gt[last]
            delta_est = invert_pose(est[first]) @ est[last]
            err = invert_pose(delta_est) @ delta_gt
            speed = d / ((last - first) / frame_rate) * 3.6
            report.errors.append(SegmentError(first, last, L, float(np.linalg.norm(err[:3, 3])) / d,
                                              rotation_angle(err) / d, speed))
    return report


def summarize(reports: Sequence[EvalReport]) -> EvalReport:
    """Pool sub-sequence errors of several sequences, so every cell is count-weighted."""
    pooled = EvalReport()
    for r in reports:
        pooled.errors.extend(r.errors)
    pooled.too_short = not pooled.errors
    return pooled


def export_trajectory(poses: Sequence[np.ndarray], path) -> tuple[Path, Path]:
    """KITTI pose file at ``path`` plus an ``x,z`` CSV beside it for plotting."""
    path = Path(path)
    write_poses(poses, path)
    xz = path.with_suffix(".xz.csv")
    with open(xz, "w") as f:
        f.write("x,z\n")
        for T in poses:
            f.write(f"{T[0, 3]:.9g},{T[2, 3]:.9g}\n")
    return path, xz


def gnuplot_script(csv_paths: dict[str, Path], out_png: str = "trajectory.png") -> str:
    plots = ", ".join(f"'{p.name}' using 1:2 with lines title '{name}'" for name, p in csv_paths.items())
    return (
        "set datafile separator ','\n"
        "set key autotitle columnhead\n"
        "set size ratio -1\n"
        "set xlabel 'x [m]'\nset ylabel 'z [m]'\n"
        f"set terminal pngcairo size 800,800\nset output '{out_png}'\n"
        f"plot {plots}\n"
    )
