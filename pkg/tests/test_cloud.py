import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dynsplat.cloud import GaussianCloud, densify_and_prune, init_from_points, logit
from dynsplat.ply import PlyError, load_ply, save_ply
from dynsplat.sh import C0, C1, evaluate_sh, num_coeffs, rgb_to_dc


def random_cloud(n, degree=2, seed=0):
    rng = np.random.default_rng(seed)
    k = num_coeffs(degree)
    return GaussianCloud(rng.normal(size=(n, 3)), rng.normal(-2, 0.5, (n, 3)), rng.normal(size=(n, 4)),
                         rng.normal(size=(n, k, 3)), rng.normal(size=(n, 1)), rng.uniform(1, 50, (n, 1)))


class TestInit:
    def test_sample_fraction(self):
        rng = np.random.default_rng(0)
        c = init_from_points(rng.normal(size=(1000, 3)), rng.uniform(size=(1000, 3)), 0.001)
        assert len(c) == 1

    def test_collinear_nearest_neighbour_scales(self):
        pts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
        c = init_from_points(pts, np.full((3, 3), 0.5), 1.0)
        np.testing.assert_allclose(c.scales, 1.0)
        np.testing.assert_allclose(c.rotations, [[1, 0, 0, 0]] * 3)

    def test_seeded(self):
        rng = np.random.default_rng(1)
        pts, cols = rng.normal(size=(500, 3)), rng.uniform(size=(500, 3))
        a = init_from_points(pts, cols, 0.1, seed=4)
        b = init_from_points(pts, cols, 0.1, seed=4)
        for k, v in a.arrays().items():
            assert np.array_equal(v, b.arrays()[k])

    def test_colors_round_trip_through_dc(self):
        cols = np.array([[0.1, 0.5, 0.9]])
        c = init_from_points(np.zeros((1, 3)), cols, 1.0, sh_degree=0)
        np.testing.assert_allclose(evaluate_sh(c.sh_coeffs, np.array([[0, 0, 1.0]])), cols)

    def test_opacity(self):
        c = init_from_points(np.random.default_rng(0).normal(size=(10, 3)), np.zeros((10, 3)), 1.0, opacity=0.1)
        np.testing.assert_allclose(c.opacity, 0.1)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            init_from_points(np.zeros((0, 3)), np.zeros((0, 3)))

    def test_shape_validation(self):
        with pytest.raises(ValueError, match="log_scales"):
            GaussianCloud(np.zeros((2, 3)), np.zeros((3, 3)), np.zeros((2, 4)), np.zeros((2, 1, 3)),
                          np.zeros((2, 1)), np.ones((2, 1)))


class TestSH:
    def test_degree0_isotropic(self):
        c = np.array([[[0.7, -0.3, 0.1]]])
        for d in ([0, 0, 1.0], [1.0, 0, 0], [0, -1.0, 0]):
            got = evaluate_sh(c, np.array([d]))
            np.testing.assert_allclose(got, np.clip(0.5 + C0 * c[0, 0], 0, 1)[None])

    def test_zero_coefficients_grey(self):
        np.testing.assert_allclose(evaluate_sh(np.zeros((1, 9, 3)), np.array([[0.6, 0, 0.8]])), 0.5)

    def test_degree1_plus_minus_z(self):
        sh = np.zeros((1, 4, 3))
        sh[0, 2] = [0.3, 0.2, 0.1]  # the z-linear basis function
        up = evaluate_sh(sh, np.array([[0, 0, 1.0]]))
        down = evaluate_sh(sh, np.array([[0, 0, -1.0]]))
        np.testing.assert_allclose(up - down, 2 * C1 * sh[0, 2][None], atol=1e-15)

    def test_dc_inverse(self):
        np.testing.assert_allclose(rgb_to_dc(0.5), 0.0)

    @given(arrays(np.float64, 3, elements=st.floats(-1, 1)), arrays(np.float64, 3, elements=st.floats(-1, 1)))
    def test_degree0_invariant_under_rotation(self, dc, d):
        if np.linalg.norm(d) < 1e-3:
            return
        d = d / np.linalg.norm(d)
        sh = dc.reshape(1, 1, 3)
        a = evaluate_sh(sh, d[None])
        b = evaluate_sh(sh, np.array([[0, 0, 1.0]]))
        np.testing.assert_array_equal(a, b)


class TestDensify:
    def setup_method(self):
        self.cloud = random_cloud(20, seed=5)
        self.cloud.opacity_logits[:] = logit(0.5)

    def test_no_gradient_no_change(self):
        out = densify_and_prune(self.cloud, np.zeros(20), 0.005, 0.01, 0.1)
        for k, v in out.arrays().items():
            assert np.array_equal(v, self.cloud.arrays()[k])

    def test_transparent_removed(self):
        self.cloud.opacity_logits[7] = -np.inf
        out = densify_and_prune(self.cloud, np.zeros(20), 0.005, 0.01, 0.1)
        assert len(out) == 19
        assert not np.any(np.all(out.positions == self.cloud.positions[7], axis=1))

    def test_split_large(self):
        self.cloud.log_scales[:] = np.log(0.05)
        self.cloud.log_scales[3] = np.log([0.5, 0.3, 0.2])
        g = np.zeros(20)
        g[3] = 1.0
        out, src, fresh = densify_and_prune(self.cloud, g, 0.005, 0.01, 0.1, return_index=True)
        assert len(out) == 21
        kids = np.nonzero(fresh)[0]
        assert len(kids) == 2 and np.all(src[kids] == 3)
        np.testing.assert_allclose(out.scales[kids], np.tile(np.array([0.5, 0.3, 0.2]) / 1.6, (2, 1)))

    def test_clone_small(self):
        self.cloud.log_scales[:] = np.log(0.01)
        g = np.zeros(20)
        g[[2, 4]] = 1.0
        out, src, fresh = densify_and_prune(self.cloud, g, 0.005, 0.01, 0.1, return_index=True)
        assert len(out) == 22
        np.testing.assert_array_equal(out.positions[fresh], self.cloud.positions[[2, 4]])

    def test_bad_thresholds(self):
        with pytest.raises(ValueError):
            densify_and_prune(self.cloud, np.zeros(20), 0.0, 0.01, 0.1)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 30), st.integers(0, 1000), st.floats(0.0, 1.0))
    def test_never_nan_never_empty(self, n, seed, hot_frac):
        rng = np.random.default_rng(seed)
        c = random_cloud(n, seed=seed)
        c.opacity_logits[0] = 2.0  # one survivor above the floor
        g = (rng.uniform(size=n) < hot_frac).astype(float)
        out = densify_and_prune(c, g, 0.01, 0.5, 0.1, seed=seed)
        assert len(out) >= 1
        for v in out.arrays().values():
            assert np.all(np.isfinite(v))


class TestPly:
    def test_empty_round_trip(self, tmp_path):
        save_ply(GaussianCloud.empty(), tmp_path / "e.ply")
        c = load_ply(tmp_path / "e.ply")
        assert len(c) == 0 and c.sh_degree == 2

    @pytest.mark.parametrize("degree", [0, 1, 3])
    def test_round_trip_bit_exact(self, tmp_path, degree):
        c = random_cloud(100, degree, seed=degree)
        save_ply(c, tmp_path / "c.ply")
        d = load_ply(tmp_path / "c.ply")
        for k, v in c.arrays().items():
            assert np.array_equal(v, d.arrays()[k]), k

    def test_missing_property_named(self, tmp_path):
        save_ply(random_cloud(3, 0), tmp_path / "c.ply")
        blob = (tmp_path / "c.ply").read_bytes().replace(b"property double rot_2\n", b"")
        (tmp_path / "bad.ply").write_bytes(blob)
        with pytest.raises(PlyError, match="rot_2"):
            load_ply(tmp_path / "bad.ply")

    def test_truncated(self, tmp_path):
        save_ply(random_cloud(3, 0), tmp_path / "c.ply")
        blob = (tmp_path / "c.ply").read_bytes()[:-8]
        (tmp_path / "t.ply").write_bytes(blob)
        with pytest.raises(PlyError, match="truncated"):
            load_ply(tmp_path / "t.ply")

    def test_float32_properties_accepted(self, tmp_path):
        c = random_cloud(4, 0)
        names = ["x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
                 "f_dc_0", "f_dc_1", "f_dc_2", "opacity"]
        data = np.concatenate([c.positions, c.log_scales, c.rotations, c.sh_coeffs[:, 0], c.opacity_logits], 1)
        head = "ply\nformat binary_little_endian 1.0\nelement vertex 4\n"
        head += "".join(f"property float {n}\n" for n in names) + "end_header\n"
        (tmp_path / "f.ply").write_bytes(head.encode() + data.astype("<f4").tobytes())
        d = load_ply(tmp_path / "f.ply")
        np.testing.assert_allclose(d.positions, c.positions, rtol=1e-6)
        np.testing.assert_array_equal(d.max_rate, 1.0)
