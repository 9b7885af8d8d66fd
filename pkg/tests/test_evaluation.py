from __future__ import annotations

import math

import numpy as np
import pytest

from lsvo.evaluation import LENGTHS, EvalReport, export_trajectory, gnuplot_script, summarize, trajectory_errors
from lsvo.flowio import parse_poses
from lsvo.geometry import compose_trajectory, to_se3


def straight(n, step=1.0, scale=1.0):
    return compose_trajectory([[0, 0, step * scale, 0, 0, 0]] * (n - 1))


def wiggly(n, seed=0):
    rng = np.random.default_rng(seed)
    return compose_trajectory(np.c_[rng.normal(0, 0.02, (n - 1, 2)), rng.uniform(0.8, 1.2, n - 1),
                                    rng.normal(0, 0.01, (n - 1, 3))])


def test_identical_trajectories_score_zero():
    gt = wiggly(900)
    rep = trajectory_errors(gt, gt)
    assert rep.overall.trans_pct < 1e-12 and rep.overall.rot_degpm < 1e-12
    assert sorted(rep.by_length) == list(LENGTHS)


def test_scaled_straight_line_is_five_percent():
    gt, est = straight(1000), straight(1000, scale=1.05)
    rep = trajectory_errors(est, gt)
    for L, cell in rep.by_length.items():
        assert cell.trans_pct == pytest.approx(5.0, abs=1e-9), L
        assert cell.rot_degpm == 0.0


def test_circle_against_straight_gives_yaw_rate():
    # 0.1 deg per metre keeps every 800 m segment below a half turn
    gt = compose_trajectory([[0, 0, 1.0, 0, math.radians(0.1), 0]] * 1199)
    rep = trajectory_errors(straight(1200), gt)
    for cell in rep.by_length.values():
        assert abs(cell.rot_degpm - 0.1) < 1e-6


def test_metric_invariant_to_global_transform():
    gt, est = wiggly(700, 1), wiggly(700, 2)
    G = to_se3([5.0, -3.0, 2.0, 0.3, -0.7, 1.1])
    a = trajectory_errors(est, gt)
    b = trajectory_errors([G @ T for T in est], [G @ T for T in gt])
    for (ka, ca), (kb, cb) in zip(a.by_length.items(), b.by_length.items()):
        assert ka == kb
        assert ca.trans_pct == pytest.approx(cb.trans_pct, rel=1e-9)
        assert ca.rot_degpm == pytest.approx(cb.rot_degpm, rel=1e-6, abs=1e-12)


def test_speed_bins_follow_frame_rate():
    gt = straight(400)  # 1 m per frame
    d1 = trajectory_errors(gt, gt, frame_rate=10.0)
    assert list(d1.by_speed) == [30.0]  # 36 km/h
    d2 = gt[::2]
    assert list(trajectory_errors(d2, d2, frame_rate=10.0).by_speed) == [70.0]  # read at the source rate: doubled
    assert list(trajectory_errors(d2, d2, frame_rate=5.0).by_speed) == [30.0]  # true pair rate: unchanged


def test_overall_is_count_weighted():
    rep = trajectory_errors(wiggly(650, 3), wiggly(650, 4))
    cells = rep.by_length.values()
    total = sum(c.count for c in cells)
    assert rep.overall.count == total
    assert rep.overall.trans_pct == pytest.approx(sum(c.trans_pct * c.count for c in cells) / total, rel=1e-12)


def test_summarize_pools_segments():
    a = trajectory_errors(wiggly(500, 5), wiggly(500, 6))
    b = trajectory_errors(wiggly(900, 7), wiggly(900, 8))
    assert summarize([a]).overall == a.overall
    same = summarize([a, a])
    assert same.overall.trans_pct == pytest.approx(a.overall.trans_pct) and same.overall.count == 2 * a.overall.count
    pooled = summarize([a, b]).overall
    expect = (a.overall.trans_pct * a.overall.count + b.overall.trans_pct * b.overall.count) / (a.overall.count + b.overall.count)
    assert pooled.trans_pct == pytest.approx(expect, rel=1e-12)


def test_short_and_mismatched_inputs():
    rep = trajectory_errors(straight(50), straight(50))
    assert rep.too_short and rep.errors == [] and math.isnan(rep.overall.trans_pct)
    with pytest.raises(ValueError):
        trajectory_errors(straight(10), straight(11))


def test_report_csv(tmp_path):
    gt = straight(300)
    rep = trajectory_errors(straight(300, scale=1.05), gt)
    rep.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "kind,key,trans_pct,rot_degpm,count"
    assert lines[1].startswith("length,100,5,") or lines[1].startswith("length,100,4.99999")
    assert lines[-1].startswith("overall,all,")


def test_export_trajectory(tmp_path):
    path, xz = export_trajectory([np.eye(4)] * 3, tmp_path / "t.txt")
    assert path.read_text().splitlines() == ["1 0 0 0 0 1 0 0 0 0 1 0"] * 3
    assert xz.read_text().splitlines()[0] == "x,z"
    traj = wiggly(25)
    export_trajectory(traj, tmp_path / "w.txt")
    back = parse_poses(tmp_path / "w.txt")
    assert len(back) == 25
    assert max(np.abs(a - b).max() for a, b in zip(traj, back)) < 1e-9
    script = gnuplot_script({"est": xz})
    assert "plot 't.xz.csv'" in script and "set size ratio -1" in script


def test_empty_report():
    assert EvalReport().overall.count == 0
