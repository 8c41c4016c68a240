import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynsplat import autodiff as ad
from dynsplat.cloud import GaussianCloud
from dynsplat.decoder import (attention, decode, decode_chunked, deform_params, heads, init_params, msa,
                              plain_hidden_width, sad_param_count)
from dynsplat.hexplane import HexPlaneField
from dynsplat.pipeline import deform


def softmax_rows(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def gate_off(h, seed=0):
    p = init_params(h, heads_count=2, seed=seed)
    p["dec.gamma1"] = np.array(0.0)
    p["dec.gamma2"] = np.array(0.0)
    return p


class TestAttention:
    def test_single_token(self):
        rng = np.random.default_rng(0)
        Q, K, V = rng.normal(size=(3, 1, 4))
        out, w = attention(Q, K, V)
        np.testing.assert_array_equal(out, V)
        assert w[0, 0] == 1.0

    def test_identical_keys_average(self):
        rng = np.random.default_rng(1)
        Q, V = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        K = np.tile(rng.normal(size=(1, 3)), (5, 1))
        out, _ = attention(Q, K, V)
        np.testing.assert_allclose(out, np.tile(V.mean(axis=0), (5, 1)), atol=1e-14)

    def test_sharp_two_token(self):
        I = np.eye(2) * 10
        V = np.array([[1.0, 2.0], [3.0, 4.0]])
        out, w = attention(I, I, V)
        e = np.exp(-100 / np.sqrt(2))
        np.testing.assert_allclose(w, [[1 / (1 + e), e / (1 + e)], [e / (1 + e), 1 / (1 + e)]], rtol=1e-14)
        np.testing.assert_allclose(out, V, atol=1e-12)

    @settings(max_examples=30)
    @given(st.integers(1, 12), st.integers(0, 10_000))
    def test_rows_stochastic(self, T, seed):
        rng = np.random.default_rng(seed)
        Q, K, V = rng.normal(0, 3, size=(3, 2, T, 4))
        _, w = attention(Q, K, V)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(w >= 0)


class TestMSA:
    def test_single_head_identity_weights(self):
        h = 4
        p = {"dec.wq": np.eye(h)[None], "dec.wk": np.eye(h)[None], "dec.wv": np.eye(h)[None], "dec.wo": np.eye(h)}
        x = np.random.default_rng(0).normal(size=(6, h))
        np.testing.assert_allclose(msa(x, p), attention(x, x, x)[0], atol=1e-14)

    def test_zero_values(self):
        p = init_params(4, heads_count=2)
        p["dec.wv"] = np.zeros_like(p["dec.wv"])
        assert np.all(msa(np.random.default_rng(0).normal(size=(5, 4)), p) == 0)

    def test_two_heads_manual(self):
        p = init_params(6, heads_count=2, seed=3)
        x = np.random.default_rng(4).normal(size=(5, 6))
        cat = []
        for j in range(2):
            Q, K, V = x @ p["dec.wq"][j], x @ p["dec.wk"][j], x @ p["dec.wv"][j]
            cat.append(softmax_rows(Q @ K.T / np.sqrt(3)) @ V)
        np.testing.assert_allclose(msa(x, p), np.hstack(cat) @ p["dec.wo"], atol=1e-13)


class TestDecode:
    def test_gate_off_doubles(self):
        x = np.random.default_rng(0).normal(size=(7, 8))
        np.testing.assert_array_equal(decode(x, gate_off(8)), 2 * x)

    def test_zero_in_zero_out(self):
        p = init_params(8, seed=1, gamma_init=0.5)
        assert np.all(decode(np.zeros((3, 8)), p) == 0)

    def test_straight_line_oracle(self):
        rng = np.random.default_rng(2)
        p = init_params(8, heads_count=2, seed=5, gamma_init=0.3)
        for k in ("dec.pre_alpha", "dec.post_alpha", "dec.pre_beta", "dec.post_beta", "dec.mlp_b1", "dec.mlp_b2"):
            p[k] = rng.normal(size=p[k].shape)
        x = rng.normal(size=(4, 8))
        a = x * p["dec.pre_alpha"] + p["dec.pre_beta"]
        heads_ = []
        for j in range(2):
            Q, K, V = a @ p["dec.wq"][j], a @ p["dec.wk"][j], a @ p["dec.wv"][j]
            heads_.append(softmax_rows(Q @ K.T / 2.0) @ V)
        y1 = a + 0.3 * (np.hstack(heads_) @ p["dec.wo"])
        b = y1 * p["dec.post_alpha"] + p["dec.post_beta"]
        z = b @ p["dec.mlp_w1"] + p["dec.mlp_b1"]
        m = (z / (1 + np.exp(-z))) @ p["dec.mlp_w2"] + p["dec.mlp_b2"]
        np.testing.assert_allclose(decode(x, p), b + 0.3 * m + x, atol=1e-12)

    def test_gradients_of_gates_and_affines(self):
        rng = np.random.default_rng(3)
        p = init_params(4, heads_count=2, seed=6, gamma_init=0.4)
        x = rng.normal(size=(5, 4))
        w = rng.normal(size=(5, 4))
        names = ["dec.gamma1", "dec.gamma2", "dec.pre_alpha", "dec.pre_beta", "dec.post_alpha", "dec.post_beta"]

        def f(*vals):
            q = dict(p)
            q.update(zip(names, vals))
            return (decode(x, q) * w).sum()
        rep = ad.gradcheck(f, [p[k] for k in names], tol=1e-4)
        assert rep.passed, str(rep)

    def test_chunk_permutation_equivariance(self):
        rng = np.random.default_rng(4)
        p = init_params(6, seed=2, gamma_init=0.5)
        x = rng.normal(size=(10, 6))
        perm = rng.permutation(5)
        full = np.concatenate([perm, 5 + rng.permutation(5)])
        a = decode_chunked(x, p, chunk=5)
        b = decode_chunked(x[full], p, chunk=5)
        np.testing.assert_allclose(b, a[full], atol=1e-15)

    def test_plain_width_matches_budget(self):
        h = 32
        m = plain_hidden_width(h)
        assert abs((2 * h * m + m + h) - sad_param_count(h)) <= 2 * h + 1

    def test_head_dims(self):
        p = init_params(4)
        out = heads(np.ones((3, 4)), p)
        assert {k: v.shape for k, v in out.items()} == {
            "mu": (3, 3), "scale": (3, 3), "rot": (3, 4), "sh": (3, 3), "opacity": (3, 1)}

    def test_heads_divisibility(self):
        with pytest.raises(ValueError):
            init_params(5, heads_count=2)


def small_cloud(n=3, seed=0):
    rng = np.random.default_rng(seed)
    return GaussianCloud(rng.uniform(-0.5, 0.5, (n, 3)), np.full((n, 3), -2.0), np.tile([1.0, 0, 0, 0], (n, 1)),
                         rng.normal(size=(n, 4, 3)), np.zeros((n, 1)), np.ones((n, 1)))


class TestDeform:
    def setup_method(self):
        self.field = HexPlaneField.create([-1, -1, -1], [1, 1, 1], hidden=4, resolution=5, time_resolution=4, seed=1)

    def test_zero_heads_identity(self):
        c = small_cloud()
        out, _ = deform(c, self.field, init_params(4, seed=2, gamma_init=0.7), 0.3)
        for k, v in c.arrays().items():
            assert np.array_equal(v, out.arrays()[k]), k

    def test_gate_off_identity(self):
        c = small_cloud()
        out, d = deform(c, self.field, gate_off(4), 0.6)
        for k, v in c.arrays().items():
            np.testing.assert_allclose(out.arrays()[k], v, atol=1e-12)

    def test_bias_translation(self):
        c = small_cloud()
        p = init_params(4, seed=2)
        p["dec.head_mu_b"] = np.array([0.1, -0.2, 0.3])
        out, _ = deform(c, self.field, p, 0.1)
        np.testing.assert_allclose(out.positions, c.positions + [0.1, -0.2, 0.3], atol=1e-15)

    def test_hand_chained_oracle(self):
        c = small_cloud()
        rng = np.random.default_rng(8)
        p = init_params(4, seed=3, gamma_init=0.2)
        for k in [k for k in p if k.startswith("dec.head_")]:
            p[k] = rng.normal(0, 0.1, p[k].shape)
        t = 0.45
        feats = self.field.encode(c.positions, t)
        y = decode(feats, p)
        d = {k: y @ p[f"dec.head_{k}_w"] + p[f"dec.head_{k}_b"] for k in ("mu", "scale", "rot", "sh", "opacity")}
        out, _ = deform(c, self.field, p, t)
        np.testing.assert_allclose(out.positions, c.positions + d["mu"], atol=1e-14)
        np.testing.assert_allclose(out.log_scales, c.log_scales + d["scale"], atol=1e-14)
        np.testing.assert_allclose(out.rotations, c.rotations + d["rot"], atol=1e-14)
        np.testing.assert_allclose(out.opacity_logits, c.opacity_logits + d["opacity"], atol=1e-14)
        np.testing.assert_allclose(out.sh_coeffs[:, 0], c.sh_coeffs[:, 0] + d["sh"], atol=1e-14)
        np.testing.assert_array_equal(out.sh_coeffs[:, 1:], c.sh_coeffs[:, 1:])

    def test_aabb_mismatch(self):
        from dynsplat.antialias import ConfigError
        with pytest.raises(ConfigError):
            deform(small_cloud(), self.field, init_params(4), 0.0, aabb=([0, 0, 0], [1, 1, 1]))

    def test_deform_params_without_sh_head(self):
        c = small_cloud()
        p = init_params(4, sh_head=False)
        base = {k: getattr(c, k) for k in ("positions", "log_scales", "rotations", "sh_coeffs", "opacity_logits")}
        out, d = deform_params(base, p, np.ones((3, 4)), sh_head=False)
        assert "sh" not in d and out["sh_coeffs"] is base["sh_coeffs"]
