import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dynsplat.geometry import (CameraModel, DegenerateInputError, backproject_depth, build_covariance,
                               look_at, project_covariance, project_point, projection_jacobian,
                               quat_to_rotation)


def axis_angle(axis, ang):
    """Rodrigues' formula, independent of the quaternion code."""
    k = np.asarray(axis, float) / np.linalg.norm(axis)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(ang) * K + (1 - np.cos(ang)) * K @ K


def cam(**kw):
    d = dict(fx=50.0, fy=60.0, cx=15.5, cy=11.5, width=32, height=24)
    d.update(kw)
    return CameraModel(**d)


class TestQuaternion:
    def test_identity(self):
        assert np.array_equal(quat_to_rotation([1, 0, 0, 0]), np.eye(3))

    def test_half_turn_about_z(self):
        np.testing.assert_allclose(quat_to_rotation([0, 0, 0, 1]), np.diag([-1.0, -1.0, 1.0]), atol=1e-15)

    def test_quarter_turn_matches_rodrigues(self):
        c = np.cos(np.pi / 4)
        R = quat_to_rotation([c, 0, 0, c])
        np.testing.assert_allclose(R, axis_angle([0, 0, 1], np.pi / 2), atol=1e-15)
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-15)

    def test_unnormalized_input_is_normalized(self):
        np.testing.assert_allclose(quat_to_rotation([2, 0, 0, 2]), quat_to_rotation([1, 0, 0, 1]))

    def test_zero_quaternion_rejected(self):
        with pytest.raises(DegenerateInputError):
            quat_to_rotation([0, 0, 0, 0])

    @given(arrays(np.float64, 4, elements=st.floats(-1, 1)), st.floats(-np.pi, np.pi))
    def test_matches_axis_angle(self, axis, ang):
        axis = axis[:3]
        if np.linalg.norm(axis) < 1e-3:
            return
        k = axis / np.linalg.norm(axis)
        q = np.concatenate([[np.cos(ang / 2)], np.sin(ang / 2) * k])
        np.testing.assert_allclose(quat_to_rotation(q), axis_angle(k, ang), atol=1e-12)


class TestCovariance:
    def test_unit(self):
        np.testing.assert_allclose(build_covariance([1, 1, 1], [1, 0, 0, 0]), np.eye(3))

    def test_axis_aligned(self):
        np.testing.assert_allclose(build_covariance([2, 1, 1], [1, 0, 0, 0]), np.diag([4.0, 1, 1]))

    def test_rotated(self):
        c = np.cos(np.pi / 4)
        R = axis_angle([0, 0, 1], np.pi / 2)
        expect = R @ np.diag([4.0, 1, 1]) @ R.T
        got = build_covariance([2, 1, 1], [c, 0, 0, c])
        np.testing.assert_allclose(got, expect, atol=1e-14)
        np.testing.assert_allclose(got, np.diag([1.0, 4, 1]), atol=1e-14)

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(DegenerateInputError):
            build_covariance([1, 0, 1], [1, 0, 0, 0])

    @given(arrays(np.float64, 3, elements=st.floats(0.01, 10)),
           arrays(np.float64, 4, elements=st.floats(-1, 1)))
    def test_eigenvalues_are_squared_scales(self, s, q):
        if np.linalg.norm(q) < 1e-3:
            return
        ev = np.linalg.eigvalsh(build_covariance(s, q))
        np.testing.assert_allclose(np.sort(ev), np.sort(s ** 2), rtol=1e-9, atol=1e-9)


class TestProjection:
    def test_on_axis(self):
        c = cam()
        p = project_point(c, [0, 0, 3.0])
        assert (p.u, p.v, p.depth) == (c.cx, c.cy, 3.0)

    def test_unit_pixel_offset(self):
        c = cam()
        p = project_point(c, [4.0 / c.fx, 0, 4.0])
        assert p.u == pytest.approx(c.cx + 1, abs=1e-12)

    def test_against_homogeneous_matrix(self):
        rng = np.random.default_rng(0)
        R, t = look_at([0.5, -0.3, -4.0], [0.1, 0.2, 0.0])
        c = cam(rotation=R, translation=t)
        X = rng.uniform(-1, 1, (20, 3))
        P = c.K @ np.hstack([R, t[:, None]])
        h = (P @ np.hstack([X, np.ones((20, 1))]).T).T
        p = project_point(c, X)
        np.testing.assert_allclose(p.u, h[:, 0] / h[:, 2], atol=1e-10)
        np.testing.assert_allclose(p.v, h[:, 1] / h[:, 2], atol=1e-10)
        np.testing.assert_allclose(p.depth, h[:, 2], atol=1e-12)

    def test_behind_camera_flagged(self):
        assert not project_point(cam(), [0, 0, -1.0]).valid

    def test_look_at_identity_pose(self):
        R, t = look_at([0, 0, 0], [0, 0, 1])
        np.testing.assert_allclose(R, np.eye(3), atol=1e-15)
        np.testing.assert_allclose(t, 0, atol=1e-15)


class TestJacobian:
    def test_on_axis(self):
        c = cam(fy=50.0)
        J, ok = projection_jacobian(c, np.array([0, 0, 2.0]))
        np.testing.assert_allclose(J, [[25, 0, 0], [0, 25, 0]])
        assert ok

    def test_finite_differences(self):
        c = cam()
        p = np.array([0.3, -0.2, 2.5])
        J, _ = projection_jacobian(c, p)
        eps = 1e-6
        num = np.zeros((2, 3))
        for k in range(3):
            d = np.zeros(3)
            d[k] = eps
            a, b = project_point(c, p + d), project_point(c, p - d)
            num[:, k] = [(a.u - b.u) / (2 * eps), (a.v - b.v) / (2 * eps)]
        err = np.abs(J - num) / np.maximum(np.abs(J), 1e-6)
        assert err[np.abs(J) > 0].max() <= 1e-6
        assert np.abs(num[J == 0]).max() < 1e-6

    def test_homogeneity_in_depth(self):
        c = cam()
        J1, _ = projection_jacobian(c, np.array([0, 0, 2.0]))
        J2, _ = projection_jacobian(c, np.array([0, 0, 4.0]))
        np.testing.assert_allclose(np.diag(J2[:, :2]), np.diag(J1[:, :2]) / 2)


class TestProjectCovariance:
    def test_zero(self):
        cov, _ = project_covariance(cam(), np.zeros((3, 3)), [0.1, 0.2, 3.0])
        assert np.all(cov == 0)

    def test_isotropic_on_axis(self):
        c = cam(fy=50.0)
        sig, z = 0.2, 4.0
        cov, _ = project_covariance(c, sig ** 2 * np.eye(3), [0, 0, z])
        np.testing.assert_allclose(cov, (50.0 * sig / z) ** 2 * np.eye(2), rtol=1e-14)

    def test_dense_triple_product(self):
        rng = np.random.default_rng(1)
        R, t = look_at([1.0, 0.5, -3.0], [0, 0, 0])
        c = cam(rotation=R, translation=t)
        for _ in range(10):
            A = rng.normal(size=(3, 3))
            S = A @ A.T
            mu = rng.uniform(-0.5, 0.5, 3)
            pc = R @ mu + t
            x, y, z = pc
            J = np.array([[c.fx / z, 0, -c.fx * x / z ** 2], [0, c.fy / z, -c.fy * y / z ** 2]])
            expect = J @ R @ S @ R.T @ J.T
            got, _ = project_covariance(c, S, mu)
            np.testing.assert_allclose(got, expect, atol=1e-12)

    @settings(max_examples=30)
    @given(arrays(np.float64, (2, 3, 3), elements=st.floats(-1, 1)))
    def test_linear_in_sigma(self, A):
        S1, S2 = A[0] @ A[0].T, A[1] @ A[1].T
        c = cam()
        mu = [0.2, -0.1, 3.0]
        p1, _ = project_covariance(c, S1, mu)
        p2, _ = project_covariance(c, S2, mu)
        p12, _ = project_covariance(c, S1 + S2, mu)
        np.testing.assert_allclose(p12, p1 + p2, atol=1e-10)


class TestBackproject:
    def test_principal_point(self):
        c = CameraModel(10.0, 10.0, 2.0, 1.0, 5, 3)
        depth = np.full((3, 5), np.nan)
        depth[1, 2] = 7.0
        pts, _ = backproject_depth(c, depth)
        np.testing.assert_allclose(pts, [[0, 0, 7.0]])

    def test_round_trip(self):
        R, t = look_at([0.4, -0.2, -3.0], [0, 0, 0])
        c = cam(rotation=R, translation=t)
        rng = np.random.default_rng(2)
        depth = rng.uniform(1, 5, (c.height, c.width))
        pts, _ = backproject_depth(c, depth)
        p = project_point(c, pts)
        vs, us = np.mgrid[0:c.height, 0:c.width]
        np.testing.assert_allclose(p.u, us.ravel(), atol=1e-9)
        np.testing.assert_allclose(p.v, vs.ravel(), atol=1e-9)
        np.testing.assert_allclose(p.depth, depth.ravel(), atol=1e-9)

    def test_ramp_with_stride(self):
        c = CameraModel(2.0, 4.0, 1.5, 1.5, 4, 4)
        depth = 1.0 + np.arange(16.0).reshape(4, 4)
        color = np.random.default_rng(0).uniform(size=(4, 4, 3))
        pts, cols = backproject_depth(c, depth, color, stride=2)
        Kinv = np.linalg.inv(c.K)
        expect = [Kinv @ [u, v, 1.0] * depth[v, u] for v in (0, 2) for u in (0, 2)]
        np.testing.assert_allclose(pts, expect, atol=1e-14)
        np.testing.assert_array_equal(cols, [color[v, u] for v in (0, 2) for u in (0, 2)])

    def test_invalid_depth_skipped(self):
        c = CameraModel(2.0, 2.0, 0.5, 0.5, 2, 2)
        pts, _ = backproject_depth(c, np.array([[1.0, np.nan], [0.0, -1.0]]))
        assert len(pts) == 1

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            backproject_depth(cam(), np.ones((3, 3)))


def test_scaled_camera_keeps_pixel_centers():
    c = cam()
    s = c.scaled(0.25)
    assert (s.width, s.height) == (8, 6)
    # the image-plane footprint of pixel edges is preserved
    assert (c.cx + 0.5) * 0.25 == pytest.approx(s.cx + 0.5)
