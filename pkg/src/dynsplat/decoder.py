"""Gated attention/MLP feature decoder and per-attribute residual heads.

Decoder parameters live in a flat dict of arrays (or tape variables) keyed
``dec.<name>``, so the same functions serve plain forward passes and
recorded training steps.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad

HEAD_DIMS = {"mu": 3, "scale": 3, "rot": 4, "sh": 3, "opacity": 1}


def attention(Q, K, V):
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes."""
    dk = np.shape(ad.value(Q))[-1]
    scores = ad.matmul(Q, ad.swapaxes(K, -1, -2)) / np.sqrt(dk)
    w = ad.softmax(scores, axis=-1)
    return ad.matmul(w, V), w


def msa(x, p):
    """Multi-head self-attention over tokens ``x`` of shape ``(T, h)``."""
    wq, wk, wv, wo = p["dec.wq"], p["dec.wk"], p["dec.wv"], p["dec.wo"]
    H, h, dk = np.shape(ad.value(wq))
    T = np.shape(ad.value(x))[0]
    Q = ad.matmul(x, wq)  # (H, T, dk)
    K = ad.matmul(x, wk)
    V = ad.matmul(x, wv)
    heads, _ = attention(Q, K, V)
    cat = ad.reshape(ad.transpose(heads, (1, 0, 2)), (T, H * dk))
    return ad.matmul(cat, wo)


def mlp(x, p):
    hid = ad.silu(ad.matmul(x, p["dec.mlp_w1"]) + p["dec.mlp_b1"])
    return ad.matmul(hid, p["dec.mlp_w2"]) + p["dec.mlp_b2"]


def affine(x, alpha, beta):
    return x * alpha + beta


def decode(x, p):
    """y' = A_pre(x) + g1 MSA(A_pre(x));  y = A_post(y') + g2 MLP(A_post(y')) + x."""
    a = affine(x, p["dec.pre_alpha"], p["dec.pre_beta"])
    y1 = a + p["dec.gamma1"] * msa(a, p)
    b = affine(y1, p["dec.post_alpha"], p["dec.post_beta"])
    return b + p["dec.gamma2"] * mlp(b, p) + x


def decode_plain(x, p):
    """Single hidden-layer MLP used when the gated decoder is ablated."""
    hid = ad.silu(ad.matmul(x, p["dec.plain_w1"]) + p["dec.plain_b1"])
    return ad.matmul(hid, p["dec.plain_w2"]) + p["dec.plain_b2"]


def decode_chunked(features, p, kind="sad", chunk=256):
    """Apply the decoder to consecutive groups of ``chunk`` tokens (by index)."""
    if kind == "mlp":
        return decode_plain(features, p)
    n = np.shape(ad.value(features))[0]
    if n <= chunk:
        return decode(features, p)
    parts = [decode(features[i:i + chunk], p) for i in range(0, n, chunk)]
    return ad.concatenate(parts, axis=0)


def heads(y, p, sh_head=True):
    out = {}
    for name, d in HEAD_DIMS.items():
        if name == "sh" and not sh_head:
            continue
        out[name] = ad.matmul(y, p[f"dec.head_{name}_w"]) + p[f"dec.head_{name}_b"]
    return out


def init_params(h, *, heads_count=2, mlp_ratio=2, gamma_init=1e-4, seed=0,
                kind="sad", sh_head=True) -> dict:
    """Fresh decoder parameters; residual heads start at zero (identity deformation)."""
    rng = np.random.default_rng(seed)
    p = {}
    if kind == "sad":
        if h % heads_count:
            raise ValueError(f"feature width {h} not divisible by {heads_count} heads")
        dk = h // heads_count
        p["dec.pre_alpha"] = np.ones(h)
        p["dec.pre_beta"] = np.zeros(h)
        p["dec.post_alpha"] = np.ones(h)
        p["dec.post_beta"] = np.zeros(h)
        p["dec.gamma1"] = np.array(gamma_init)
        p["dec.gamma2"] = np.array(gamma_init)
        for nm in ("wq", "wk", "wv"):
            p[f"dec.{nm}"] = rng.standard_normal((heads_count, h, dk)) / np.sqrt(h)
        p["dec.wo"] = rng.standard_normal((heads_count * dk, h)) / np.sqrt(heads_count * dk)
        m = mlp_ratio * h
        p["dec.mlp_w1"] = rng.standard_normal((h, m)) / np.sqrt(h)
        p["dec.mlp_b1"] = np.zeros(m)
        p["dec.mlp_w2"] = rng.standard_normal((m, h)) / np.sqrt(m)
        p["dec.mlp_b2"] = np.zeros(h)
    elif kind == "mlp":
        m = plain_hidden_width(h, heads_count=heads_count, mlp_ratio=mlp_ratio)
        p["dec.plain_w1"] = rng.standard_normal((h, m)) / np.sqrt(h)
        p["dec.plain_b1"] = np.zeros(m)
        p["dec.plain_w2"] = rng.standard_normal((m, h)) / np.sqrt(m)
        p["dec.plain_b2"] = np.zeros(h)
    else:
        raise ValueError(f"unknown decoder kind {kind!r}")
    for name, d in HEAD_DIMS.items():
        if name == "sh" and not sh_head:
            continue
        p[f"dec.head_{name}_w"] = np.zeros((h, d))
        p[f"dec.head_{name}_b"] = np.zeros(d)
    return p


def sad_param_count(h, heads_count=2, mlp_ratio=2) -> int:
    dk = h // heads_count
    m = mlp_ratio * h
    return 4 * h + 2 + 3 * heads_count * h * dk + heads_count * dk * h + 2 * h * m + m + h


def plain_hidden_width(h, heads_count=2, mlp_ratio=2) -> int:
    """Hidden width giving the plain MLP about as many weights as the gated block."""
    target = sad_param_count(h, heads_count, mlp_ratio)
    return max(1, int(round((target - h) / (2 * h + 1))))


def deform_params(base: dict, p: dict, features, *, kind="sad", chunk=256, sh_head=True):
    """Apply decoded residuals to canonical attributes.

    ``base`` holds ``positions``, ``log_scales``, ``rotations``, ``sh_coeffs``
    and ``opacity_logits``. Scale and opacity residuals are added in log and
    logit domain. Returns ``(deformed, deltas)``.
    """
    y = decode_chunked(features, p, kind=kind, chunk=chunk)
    d = heads(y, p, sh_head=sh_head)
    out = dict(base)
    out["positions"] = base["positions"] + d["mu"]
    out["log_scales"] = base["log_scales"] + d["scale"]
    out["rotations"] = base["rotations"] + d["rot"]
    out["opacity_logits"] = base["opacity_logits"] + d["opacity"]
    if sh_head:
        sh = base["sh_coeffs"]
        k = np.shape(ad.value(sh))[1]
        dc = sh[:, 0:1, :] + ad.reshape(d["sh"], (-1, 1, 3))
        out["sh_coeffs"] = ad.concatenate([dc, sh[:, 1:, :]], axis=1) if k > 1 else dc
    return out, d
