"""On-disk image/ground-truth formats round-trip exactly."""

import numpy as np
import pytest

from densedesc.frames import (GroundTruth, RgbdFrame, read_depth_pgm,
                              read_ground_truth, read_mask_pgm, read_ppm,
                              load_frame, save_frame, write_depth_pgm,
                              write_ground_truth, write_mask_pgm, write_ppm)
from densedesc.geometry import Pose


def test_ppm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = np.round(rng.uniform(0, 1, (5, 7, 3)) * 255) / 255.0
    write_ppm(tmp_path / "x.ppm", img)
    back = read_ppm(tmp_path / "x.ppm")
    np.testing.assert_allclose(back, img, atol=1e-12)


def test_ppm_header(tmp_path):
    write_ppm(tmp_path / "x.ppm", np.zeros((2, 3, 3)))
    blob = (tmp_path / "x.ppm").read_bytes()
    assert blob.startswith(b"P6\n3 2\n255\n")
    assert len(blob) == len(b"P6\n3 2\n255\n") + 2 * 3 * 3


def test_depth_pgm_round_trip(tmp_path):
    depth = np.array([[0.0, 0.001], [1.5, 6.5535]])
    write_depth_pgm(tmp_path / "d.pgm", depth)
    back = read_depth_pgm(tmp_path / "d.pgm")
    np.testing.assert_allclose(back, depth, atol=5e-4)  # mm quantization
    assert back[0, 0] == 0.0


def test_depth_pgm_big_endian(tmp_path):
    write_depth_pgm(tmp_path / "d.pgm", np.array([[0.258]]))  # 258 mm = 0x0102
    blob = (tmp_path / "d.pgm").read_bytes()
    assert blob.endswith(b"\x01\x02")


def test_mask_pgm_round_trip(tmp_path):
    mask = np.array([[True, False], [False, True]])
    write_mask_pgm(tmp_path / "m.pgm", mask)
    np.testing.assert_array_equal(read_mask_pgm(tmp_path / "m.pgm"), mask)


def test_ground_truth_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    gt = GroundTruth(object_id=rng.integers(0, 3, (4, 6)).astype(np.int32),
                     surface_coord=rng.normal(size=(4, 6, 3)).astype(np.float32))
    write_ground_truth(tmp_path / "f.gt", gt)
    back = read_ground_truth(tmp_path / "f.gt")
    np.testing.assert_array_equal(back.object_id, gt.object_id)
    np.testing.assert_allclose(back.surface_coord, gt.surface_coord, atol=1e-7)


def test_save_load_frame(tmp_path, k64):
    rng = np.random.default_rng(2)
    frame = RgbdFrame(rgb=np.round(rng.uniform(0, 1, (48, 64, 3)) * 255) / 255.0,
                      depth=np.abs(rng.normal(1.0, 0.1, (48, 64))),
                      pose=Pose(np.eye(3), [0.1, 0.2, 0.3]), intrinsics=k64)
    mask = rng.random((48, 64)) > 0.5
    gt = GroundTruth(object_id=mask.astype(np.int32),
                     surface_coord=rng.normal(size=(48, 64, 3)).astype(np.float32))
    save_frame(tmp_path, 3, frame, mask=mask, gt=gt)
    loaded, lmask, lgt = load_frame(tmp_path, 3, k64)
    np.testing.assert_allclose(loaded.rgb, frame.rgb, atol=1e-12)
    np.testing.assert_allclose(loaded.depth, frame.depth, atol=5e-4)
    np.testing.assert_array_equal(loaded.pose.translation, frame.pose.translation)
    np.testing.assert_array_equal(lmask, mask)
    np.testing.assert_array_equal(lgt.object_id, gt.object_id)


def test_frame_validate(k64):
    good = RgbdFrame(rgb=np.zeros((48, 64, 3)), depth=np.zeros((48, 64)),
                     pose=Pose.identity(), intrinsics=k64)
    good.validate()
    bad = RgbdFrame(rgb=np.zeros((48, 64, 3)) - 0.1, depth=np.zeros((48, 64)),
                    pose=Pose.identity(), intrinsics=k64)
    with pytest.raises(ValueError):
        bad.validate()
    worse = RgbdFrame(rgb=np.zeros((48, 64, 3)), depth=np.full((48, 64), -1.0),
                      pose=Pose.identity(), intrinsics=k64)
    with pytest.raises(ValueError):
        worse.validate()
