from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evtrack.errors import DimensionMismatch, InvalidDepth, OutOfBounds, ParseError
from evtrack.photomap import (
    INTENSITY_FLOOR,
    PhotometricMap,
    ReferenceKeyframe,
    load_map_dir,
    log_from_intensity,
    read_pfm,
    read_pgm,
    sample_depth,
    sample_log_intensity,
    save_map_dir,
    select_reference,
    write_pfm,
    write_pgm,
)
from evtrack.se3 import CameraIntrinsics, Pose

from conftest import custom_map

CAM = CameraIntrinsics(50.0, 50.0, 7.5, 5.5, 16, 12)


def keyframe(pose=None, depth=1.0, seed=0):
    rng = np.random.default_rng(seed)
    img = rng.integers(1, 65535, size=(12, 16)).astype(np.uint16)
    return ReferenceKeyframe(img, np.full((12, 16), depth, np.float32), pose or Pose.identity(), CAM)


@pytest.mark.parametrize("maxval, dtype", [(255, np.uint8), (65535, np.uint16), (1023, np.uint16)])
def test_pgm_round_trip(tmp_path, maxval, dtype):
    img = np.random.default_rng(1).integers(0, maxval + 1, size=(7, 9)).astype(dtype)
    write_pgm(tmp_path / "a.pgm", img, maxval)
    back, mv = read_pgm(tmp_path / "a.pgm")
    assert mv == maxval
    np.testing.assert_array_equal(back, img)


def test_pgm_header_comments_and_errors(tmp_path):
    raw = b"P5\n# a comment\n3 2\n# another\n255\n" + bytes(range(6))
    (tmp_path / "c.pgm").write_bytes(raw)
    img, _ = read_pgm(tmp_path / "c.pgm")
    np.testing.assert_array_equal(img, [[0, 1, 2], [3, 4, 5]])
    (tmp_path / "p2.pgm").write_bytes(b"P2\n3 2\n255\n0 1 2 3 4 5\n")
    with pytest.raises(ParseError):
        read_pgm(tmp_path / "p2.pgm")
    (tmp_path / "short.pgm").write_bytes(b"P5\n3 2\n255\n" + bytes(3))
    with pytest.raises(ParseError):
        read_pgm(tmp_path / "short.pgm")


def test_pfm_round_trip_with_holes(tmp_path):
    d = np.random.default_rng(2).uniform(0.5, 2.0, size=(5, 8)).astype(np.float32)
    d[1, 2] = 0.0
    d[3, 4] = np.nan
    write_pfm(tmp_path / "d.pfm", d)
    back = read_pfm(tmp_path / "d.pfm")
    assert back.tobytes() == d.tobytes()


def test_pfm_rejects_color(tmp_path):
    (tmp_path / "c.pfm").write_bytes(b"PF\n1 1\n-1.0\n" + bytes(12))
    with pytest.raises(ParseError):
        read_pfm(tmp_path / "c.pfm")


def test_intensity_floor_keeps_log_finite():
    L = log_from_intensity(np.array([[0, 10, 1000]], dtype=np.uint16))
    assert np.all(np.isfinite(L))
    assert L[0, 0] == pytest.approx(np.log(INTENSITY_FLOOR * 1000))


def test_sample_log_intensity_nodes_midpoints_constant():
    rng = np.random.default_rng(3)
    L = rng.normal(size=(12, 16))
    pmap = custom_map(L, 1.0)
    assert sample_log_intensity(pmap, 0, (4, 5)) == L[5, 4]
    assert sample_log_intensity(pmap, 0, (4.5, 5)) == pytest.approx((L[5, 4] + L[5, 5]) / 2, abs=1e-15)
    const = custom_map(np.full((12, 16), 0.7), 1.0)
    for u in rng.uniform([1, 1], [14, 10], size=(20, 2)):
        assert sample_log_intensity(const, 0, u) == pytest.approx(0.7, abs=1e-15)


@pytest.mark.parametrize("u", [(0.5, 5), (14.5, 5), (5, 0.2), (5, 10.5)])
def test_sample_out_of_bounds(u):
    pmap = custom_map(np.zeros((12, 16)), 1.0)
    with pytest.raises(OutOfBounds):
        sample_log_intensity(pmap, 0, u)
    with pytest.raises(OutOfBounds):
        sample_depth(pmap, 0, u)


@settings(max_examples=100)
@given(st.floats(1, 13.9), st.floats(1, 9.9), st.floats(-1e-3, 1e-3), st.floats(-1e-3, 1e-3))
def test_sampling_is_lipschitz(x, y, dx, dy):
    L = np.random.default_rng(4).normal(size=(12, 16))
    pmap = custom_map(L, 1.0)
    eps = max(abs(dx), abs(dy))
    step = max(np.abs(np.diff(L, axis=0)).max(), np.abs(np.diff(L, axis=1)).max())
    a = sample_log_intensity(pmap, 0, (x, y))
    b = sample_log_intensity(pmap, 0, (min(max(x + dx, 1.0), 14.0), min(max(y + dy, 1.0), 10.0)))
    assert abs(a - b) <= eps * step * 2 + 1e-12


def test_sample_depth_nodes_constant_and_holes():
    d = np.full((12, 16), 2.5, np.float32)
    d[6, 9] = 1.25
    d[2, 2] = 0.0
    d[8, 12] = np.nan
    pmap = custom_map(np.zeros((12, 16)), d)
    assert sample_depth(pmap, 0, (9, 6)) == pytest.approx(1.25)
    assert sample_depth(pmap, 0, (5.3, 7.7)) == pytest.approx(2.5)
    for u in [(2.5, 2.5), (1.5, 1.2), (11.5, 7.5), (12, 8)]:
        with pytest.raises(InvalidDepth):
            sample_depth(pmap, 0, u)


def test_mean_scene_depth_uses_valid_pixels_of_first_keyframe():
    d = np.full((12, 16), 2.0, np.float32)
    d[:6] = 1.0
    d[0, 0] = -1.0
    kf = ReferenceKeyframe(np.ones((12, 16), np.uint16), d, Pose.identity(), CAM)
    expect = (1.0 * (6 * 16 - 1) + 2.0 * 6 * 16) / (12 * 16 - 1)
    assert PhotometricMap([kf, keyframe(depth=9.0)]).mean_scene_depth == pytest.approx(expect)


def test_keyframe_dimension_checks():
    with pytest.raises(DimensionMismatch):
        ReferenceKeyframe(np.ones((12, 16), np.uint16), np.ones((12, 15), np.float32), Pose.identity(), CAM)
    with pytest.raises(DimensionMismatch):
        ReferenceKeyframe(np.ones((10, 16), np.uint16), np.ones((10, 16), np.float32), Pose.identity(), CAM)
    with pytest.raises(ValueError):
        PhotometricMap([])


def test_select_reference_single_and_exact():
    single = PhotometricMap([keyframe()])
    assert select_reference(single, Pose.from_rotvec([0, 1.0, 0], [3, 0, 0])) == 0
    poses = [Pose.identity(), Pose.from_rotvec([0, 0.3, 0], [0.4, 0, 0]), Pose.from_rotvec([0.2, 0, 0], [0, 0.5, 0])]
    pmap = PhotometricMap([keyframe(p) for p in poses])
    for k, p in enumerate(poses):
        assert select_reference(pmap, p) == k


def test_select_reference_uses_combined_score():
    # mean depth 1 m. Camera at x=0.2 m, rotated 0.4 rad about y.
    # keyframe 0 (identity): 0.2/1 + 0.4 = 0.6
    # keyframe 1 (x=0.5 m, same 0.4 rad rotation): 0.3/1 + 0.0 = 0.3  -> chosen
    # although keyframe 0 is nearer by translation alone
    kf1 = Pose.from_rotvec([0, 0.4, 0], [0.5, 0, 0])
    pmap = PhotometricMap([keyframe(), keyframe(kf1)])
    assert select_reference(pmap, Pose.from_rotvec([0, 0.4, 0], [0.2, 0, 0])) == 1
    # without the rotation the scores are 0.2 and 0.3 + 0.4: keyframe 0
    assert select_reference(pmap, Pose.from_rotvec([0, 0, 0], [0.2, 0, 0])) == 0


def test_map_dir_round_trip_is_bit_exact(tmp_path):
    d = np.full((12, 16), 1.5, np.float32)
    d[3, 3] = 0.0
    kf0 = ReferenceKeyframe(keyframe().intensity, d, Pose.from_rotvec([0.1, 0.2, 0.3], [1, 2, 3]), CAM)
    pmap = PhotometricMap([kf0, keyframe(Pose.identity(), 2.0, seed=5)])
    save_map_dir(pmap, tmp_path / "m")
    back = load_map_dir(tmp_path / "m")
    save_map_dir(back, tmp_path / "m2")
    for a, b in zip(pmap.keyframes, back.keyframes):
        np.testing.assert_array_equal(a.intensity, b.intensity)
        assert a.depth.tobytes() == b.depth.tobytes()
        assert a.log_intensity.tobytes() == b.log_intensity.tobytes()
        np.testing.assert_array_equal(a.pose.quat, b.pose.quat)
        np.testing.assert_array_equal(a.pose.translation, b.pose.translation)
        assert a.intrinsics == b.intrinsics
    for name in ("kf000.pgm", "kf000.pfm", "kf001.pgm", "poses.txt", "intrinsics.txt"):
        assert (tmp_path / "m" / name).read_bytes() == (tmp_path / "m2" / name).read_bytes()


def test_load_map_errors(tmp_path):
    pmap = PhotometricMap([keyframe()])
    save_map_dir(pmap, tmp_path)
    (tmp_path / "poses.txt").write_text("kf000 0 0 0 0 0 0 2\n")
    with pytest.raises(ParseError):
        load_map_dir(tmp_path)
    (tmp_path / "poses.txt").write_text("kf000 0 0 0 0 0 1\n")
    with pytest.raises(ParseError, match=r"poses.txt:1"):
        load_map_dir(tmp_path)
    (tmp_path / "poses.txt").write_text("other 0 0 0 0 0 0 1\n")
    with pytest.raises(ParseError):
        load_map_dir(tmp_path)
    (tmp_path / "poses.txt").write_text("kf000 0 0 0 0 0 0 1\n")
    write_pfm(tmp_path / "kf000.pfm", np.ones((3, 3), np.float32))
    with pytest.raises(DimensionMismatch):
        load_map_dir(tmp_path)
    with pytest.raises(ParseError):
        load_map_dir(tmp_path / "no_such_dir")
