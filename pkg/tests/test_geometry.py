"""Projection algebra and pose group tests.

Hand-computed cases pin the pinhole conventions; hypothesis covers the
round-trip and group identities on random inputs.
"""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densedesc.errors import BehindCameraError, InvalidDepthError
from densedesc.geometry import (Intrinsics, Pixel, Pose, pose_apply,
                                pose_compose, pose_inverse, project,
                                project_points, rotation_angle_deg, round_pixel,
                                unproject, unproject_pixels)


def rot_z(deg):
    t = np.deg2rad(deg)
    return np.array([[np.cos(t), -np.sin(t), 0], [np.sin(t), np.cos(t), 0],
                     [0, 0, 1]])


def random_rotation(rng):
    """Uniform random rotation via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


class TestProject:
    def test_principal_point(self, k64):
        px, depth = project(np.array([0.0, 0.0, 1.0]), k64)
        assert (px.u, px.v, depth) == (32.0, 24.0, 1.0)

    def test_pinhole_formula(self, k64):
        # u = fx*x/z + cx = 50*0.2 + 32 = 42
        px, depth = project(np.array([0.2, 0.0, 1.0]), k64)
        assert (px.u, px.v, depth) == (42.0, 24.0, 1.0)

    def test_behind_camera(self, k64):
        with pytest.raises(BehindCameraError):
            project(np.array([0.0, 0.0, -1.0]), k64)
        with pytest.raises(BehindCameraError):
            project(np.array([0.1, 0.1, 0.0]), k64)

    def test_vectorized_matches_scalar(self, k64):
        rng = np.random.default_rng(0)
        pts = rng.uniform([-0.5, -0.5, 0.2], [0.5, 0.5, 3.0], size=(50, 3))
        uv, z, valid = project_points(pts, k64)
        assert valid.all()
        for i in range(len(pts)):
            px, d = project(pts[i], k64)
            np.testing.assert_allclose([px.u, px.v], uv[i], atol=1e-12)
            assert d == z[i]

    def test_vectorized_flags_behind(self, k64):
        _, _, valid = project_points(np.array([[0, 0, 1.0], [0, 0, -1.0]]), k64)
        assert valid.tolist() == [True, False]


class TestUnproject:
    def test_principal_point(self, k64):
        np.testing.assert_allclose(unproject(Pixel(32, 24), 1.0, k64),
                                   [0.0, 0.0, 1.0])

    def test_inverse_pinhole(self, k64):
        # x = (u-cx)/fx * d = (42-32)/50 * 2 = 0.4
        np.testing.assert_allclose(unproject(Pixel(42, 24), 2.0, k64),
                                   [0.4, 0.0, 2.0])

    def test_invalid_depth(self, k64):
        with pytest.raises(InvalidDepthError):
            unproject(Pixel(42, 24), 0.0, k64)

    @settings(deadline=None)
    @given(u=st.floats(0, 63), v=st.floats(0, 47), d=st.floats(0.1, 5.0))
    def test_round_trip(self, u, v, d):
        k = Intrinsics(fx=50.0, fy=50.0, cx=32.0, cy=24.0, width=64, height=48)
        px, depth = project(unproject(Pixel(u, v), d, k), k)
        assert abs(px.u - u) < 1e-7 and abs(px.v - v) < 1e-7
        assert abs(depth - d) < 1e-7

    def test_vectorized_matches_scalar(self, k64):
        uv = np.array([[3.0, 4.0], [60.0, 40.0]])
        d = np.array([0.7, 2.0])
        pts = unproject_pixels(uv, d, k64)
        for i in range(2):
            np.testing.assert_allclose(pts[i],
                                       unproject(Pixel(*uv[i]), d[i], k64))


class TestPose:
    def test_identity_apply(self):
        assert pose_apply(Pose.identity(), np.array([1.0, 2.0, 3.0])).tolist() \
            == [1.0, 2.0, 3.0]

    def test_pure_translation(self):
        p = Pose(np.eye(3), [0.0, 0.0, 1.0])
        assert pose_apply(p, np.zeros(3)).tolist() == [0.0, 0.0, 1.0]

    def test_rot180_about_z(self):
        p = Pose(rot_z(180.0), np.zeros(3))
        np.testing.assert_allclose(pose_apply(p, [1.0, 0.0, 0.0]),
                                   [-1.0, 0.0, 0.0], atol=1e-12)

    @settings(deadline=None, max_examples=30)
    @given(seed=st.integers(0, 2**31))
    def test_inverse_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        p = Pose(random_rotation(rng), rng.normal(size=3))
        x = rng.normal(size=3)
        np.testing.assert_allclose(
            pose_apply(pose_inverse(p), pose_apply(p, x)), x, atol=1e-9)

    @settings(deadline=None, max_examples=30)
    @given(seed=st.integers(0, 2**31))
    def test_compose_inverse_is_identity(self, seed):
        rng = np.random.default_rng(seed)
        p = Pose(random_rotation(rng), rng.normal(size=3))
        q = pose_compose(p, pose_inverse(p))
        np.testing.assert_allclose(q.rotation, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(q.translation, 0.0, atol=1e-9)

    @settings(deadline=None, max_examples=20)
    @given(seed=st.integers(0, 2**31))
    def test_compose_associative(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (Pose(random_rotation(rng), rng.normal(size=3))
                   for _ in range(3))
        x = rng.normal(size=3)
        left = pose_compose(pose_compose(a, b), c).apply(x)
        right = pose_compose(a, pose_compose(b, c)).apply(x)
        np.testing.assert_allclose(left, right, atol=1e-9)

    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            Pose(np.eye(3) * 1.001, np.zeros(3))

    def test_rejects_reflection(self):
        r = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            Pose(r, np.zeros(3))

    def test_json_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        p = Pose(random_rotation(rng), rng.normal(size=3))
        q = Pose.from_json(p.to_json())
        np.testing.assert_array_equal(p.rotation, q.rotation)
        np.testing.assert_array_equal(p.translation, q.translation)
        path = tmp_path / "pose.json"
        p.save(path)
        with open(path) as f:
            d = json.load(f)
        assert set(d) == {"rotation_row_major", "translation"}
        assert len(d["rotation_row_major"]) == 9
        r = Pose.load(path)
        np.testing.assert_array_equal(p.rotation, r.rotation)

    def test_rotation_angle(self):
        assert rotation_angle_deg(np.eye(3), rot_z(30)) == pytest.approx(30.0)


class TestPixelRounding:
    def test_round_half_up(self):
        assert round_pixel(0.5) == 1
        assert round_pixel(0.4) == 0
        assert round_pixel(1.5) == 2

    def test_pixel_rounded(self):
        assert Pixel(0.4, 0.6).rounded() == (0, 1)

    def test_in_bounds(self, k64):
        assert Pixel(63.4, 47.4).in_bounds(k64)
        assert not Pixel(63.6, 0.0).in_bounds(k64)


class TestIntrinsics:
    def test_invariants(self):
        with pytest.raises(ValueError):
            Intrinsics(fx=-1, fy=1, cx=0, cy=0, width=4, height=4)
        with pytest.raises(ValueError):
            Intrinsics(fx=1, fy=1, cx=5, cy=0, width=4, height=4)

    def test_json_round_trip(self, k64):
        assert Intrinsics.from_json(k64.to_json()) == k64
