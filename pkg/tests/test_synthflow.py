from __future__ import annotations

import numpy as np
import pytest

from lsvo.flowio import read_flo, read_manifest
from lsvo.synthflow import Camera, DepthModel, MotionSpec, generate_dataset, generate_samples, motion_field
from oracles import motion_at_bounds, relative_field_error, reprojection_flow

CAM = Camera()
RAMP = DepthModel("ramp", (6.0, 20.0))


def test_camera_contract():
    assert (CAM.focal, CAM.height, CAM.width) == (300.0, 94, 300)
    with pytest.raises(ValueError):
        Camera(focal=0)
    with pytest.raises(ValueError):
        Camera(cx=400.0)
    half = CAM.scaled(0.5)
    assert (half.height, half.width, half.focal) == (47, 150, 150.0)


def test_depth_must_be_positive():
    with pytest.raises(ValueError):
        DepthModel("constant", (0.0,)).render(CAM)
    with pytest.raises(ValueError):
        motion_field(CAM, -np.ones((94, 300)), np.zeros(6))
    with pytest.raises(ValueError):
        DepthModel("map", (), np.ones((3, 3))).render(CAM)


def test_forward_motion_is_radial():
    cam = Camera(300.0, 95, 301)  # odd size puts the principal point on a pixel
    f = motion_field(cam, DepthModel("constant", (10.0,)), [0, 0, 1, 0, 0, 0])
    assert np.all(f[47, 150] == 0)
    x, y = cam.centred_grid()
    cross = f[..., 0] * y - f[..., 1] * x
    assert np.abs(cross).max() < 1e-12
    assert np.all(f[..., 0] * x >= 0)


def test_rotation_is_depth_invariant():
    y = [0, 0, 0, 0.01, 0.02, -0.005]
    np.testing.assert_array_equal(motion_field(CAM, DepthModel("constant", (5.0,)), y),
                                  motion_field(CAM, DepthModel("constant", (50.0,)), y))


def test_translation_additive_and_inverse_depth():
    rng = np.random.default_rng(0)
    t1, t2 = rng.normal(size=3), rng.normal(size=3)
    Z = RAMP.render(CAM)
    a = motion_field(CAM, Z, np.r_[t1, 0, 0, 0])
    b = motion_field(CAM, Z, np.r_[t2, 0, 0, 0])
    ab = motion_field(CAM, Z, np.r_[t1 + t2, 0, 0, 0])
    np.testing.assert_allclose(ab, a + b, rtol=0, atol=1e-12 * np.abs(ab).max())
    np.testing.assert_allclose(motion_field(CAM, 2 * Z, np.r_[t1, 0, 0, 0]), 0.5 * a, rtol=1e-15, atol=1e-13)


def test_regime_check():
    with pytest.raises(ValueError, match="small-motion"):
        motion_field(CAM, RAMP, [0, 0, 0, 0, 0.25, 0], check_regime=True)
    with pytest.raises(ValueError, match="small-motion"):
        motion_field(CAM, RAMP, [0, 0, 1.3, 0, 0, 0], check_regime=True)
    motion_field(CAM, RAMP, [0, 0, 1.0, 0, 0.1, 0], check_regime=True)


def test_first_order_error_shrinks_linearly():
    Z = RAMP.render(CAM)
    y = motion_at_bounds(np.random.default_rng(1), Z.min(), 0.5)
    errs = [relative_field_error(motion_field(CAM, Z, s * y), reprojection_flow(CAM, Z, s * y)) for s in (0.1, 0.01)]
    assert 7 < errs[0] / errs[1] < 13


def test_matches_reprojection_for_small_motion():
    Z = RAMP.render(CAM)
    rng = np.random.default_rng(2)
    for _ in range(10):
        y = motion_at_bounds(rng, Z.min(), 0.01)
        assert relative_field_error(motion_field(CAM, Z, y), reprojection_flow(CAM, Z, y)) < 0.005


def test_dataset_on_disk(tmp_path):
    man = generate_dataset(0, MotionSpec(), RAMP, CAM, 0, tmp_path / "empty")
    assert len(man) == 0 and read_manifest(tmp_path / "empty" / "synth.txt").records == []
    cam = Camera(40.0, 10, 12)
    man = generate_dataset(3, MotionSpec(), RAMP, cam, 7, tmp_path / "a")
    back = read_manifest(tmp_path / "a" / "synth.txt")
    assert len(back) == 3
    flow = read_flo(tmp_path / "a" / back.paths[1])
    assert flow.shape == (10, 12, 2)
    np.testing.assert_allclose(back.labels, man.labels)
    generate_dataset(3, MotionSpec(), RAMP, cam, 7, tmp_path / "b")
    for p in back.paths:
        assert (tmp_path / "a" / p).read_bytes() == (tmp_path / "b" / p.replace("a/", "b/")).read_bytes()
    assert (tmp_path / "a" / "synth.txt").read_text() == (tmp_path / "b" / "synth.txt").read_text()


def test_dynamics_scale_flow_linearly():
    cam = Camera(60.0, 20, 30)
    const = DepthModel("constant", (10.0,))
    f1, y1 = generate_samples(4, MotionSpec(scale=1.0), const, cam, 3)
    f3, y3 = generate_samples(4, MotionSpec(scale=3.0), const, cam, 3)
    np.testing.assert_allclose(y3, 3 * y1, rtol=1e-15)
    np.testing.assert_allclose(f3, 3 * f1, rtol=1e-12, atol=1e-12)


def test_sample_streams_are_independent_of_n():
    cam = Camera(60.0, 20, 30)
    f5, y5 = generate_samples(5, MotionSpec(), RAMP, cam, 9, noise=0.1)
    f2, y2 = generate_samples(2, MotionSpec(), RAMP, cam, 9, noise=0.1, offset=3)
    np.testing.assert_array_equal(y5[3:], y2)
    np.testing.assert_array_equal(f5[3:], f2)
