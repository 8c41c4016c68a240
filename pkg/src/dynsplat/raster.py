"""Tile-based alpha compositing of projected Gaussians, with its adjoint.

Per pixel ``p`` (pixel centers at integer coordinates)::

    alpha_i = min(alpha_max, o_i * exp(-0.5 d^T conic_i d)),  d = p - m_i
    alpha_i = 0 where o_i * exp(-0.5 d^T conic_i d) < support_alpha
    C(p)    = sum_i c_i alpha_i T_i + bg * T_final,  T_i = prod_{j<i} (1 - alpha_j)

Primitives are globally sorted front to back by depth (ties by index). A
primitive contributes only while ``T_i >= min_transmittance``. Each
primitive is binned into the pixels where ``o * exp(-q) >= support_alpha``;
the resulting per-pixel lists are grouped by tile, and tiles are the unit of
(optionally threaded) work. Transmittance products are evaluated as
exponentiated running sums of ``log(1 - alpha)`` within each pixel list.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass
class RasterConfig:
    tile_size: int = 16
    alpha_max: float = 0.99
    min_transmittance: float = 1e-4
    support_alpha: float = 1e-9
    depth_alpha_eps: float = 1e-6
    workers: int = 1


@dataclass
class ProjectedGaussians:
    """Screen-space primitives. ``cov2d`` rows are ``(a, b, c)`` of ``[[a, b], [b, c]]``."""

    means2d: np.ndarray
    cov2d: np.ndarray
    colors: np.ndarray
    opacity: np.ndarray
    depths: np.ndarray

    def __post_init__(self):
        self.means2d = np.asarray(self.means2d, dtype=np.float64).reshape(-1, 2)
        n = len(self.means2d)
        self.cov2d = np.asarray(self.cov2d, dtype=np.float64).reshape(n, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.opacity = np.asarray(self.opacity, dtype=np.float64).reshape(n)
        self.depths = np.asarray(self.depths, dtype=np.float64).reshape(n)

    def __len__(self):
        return len(self.means2d)

    def permuted(self, perm) -> "ProjectedGaussians":
        return ProjectedGaussians(self.means2d[perm], self.cov2d[perm], self.colors[perm],
                                  self.opacity[perm], self.depths[perm])


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W) alpha-normalized expected depth
    alpha: np.ndarray  # (H, W)


@dataclass
class RasterStats:
    skipped_singular: int = 0
    binned: int = 0
    tile_pairs: int = 0


stats = RasterStats()


# ----------------------------------------------------------------------------
# conic helpers

def conic_from_cov(a, b, c):
    """Entries of the inverse of ``[[a, b], [b, c]]``; works on tape variables."""
    det = a * c - b * b
    return c / det, -b / det, a / det


# ----------------------------------------------------------------------------
# binning: per-pixel contribution lists grouped by tile

@dataclass
class _Plan:
    width: int
    height: int
    n: int
    order: np.ndarray  # front-to-back primitive indices that survived culling
    tiles: list = field(default_factory=list)  # (y0, y1, x0, x1, pairs) per tile
    cache: list = field(default_factory=list)  # forward state per tile, reused by the adjoint


def _support_rows(means2d, conic, opacity, support_alpha, height):
    """Row range of each footprint ``o * exp(-q) >= support_alpha``.

    Returns ``(ok, k, y0, y1)`` where ``k = log(o / support_alpha)`` is the
    cutoff on ``q``. Ranges are inflated slightly so rounding never drops a
    pixel that passes the exact per-pixel test.
    """
    A, B, C = conic[:, 0], conic[:, 1], conic[:, 2]
    detc = A * C - B * B
    with np.errstate(divide="ignore", invalid="ignore"):
        syy = A / detc
        k = np.log(np.maximum(opacity, 1e-300) / support_alpha)
        ry = np.sqrt(2.0 * k * syy) * (1 + 1e-9) + 1e-9
        my = means2d[:, 1]
        y0 = np.maximum(np.ceil(my - ry), 0)
        y1 = np.minimum(np.floor(my + ry), height - 1)
    ok = (detc > 0) & (A > 0) & (k > 0) & np.isfinite(ry) & (y0 <= y1)
    return ok, k, y0, y1


def _plan(means2d, conic, opacity, depths, width, height, cfg: RasterConfig) -> _Plan:
    n = len(means2d)
    ok, kq, by0, by1 = _support_rows(means2d, conic, opacity, cfg.support_alpha, height)
    stats.skipped_singular += int(np.count_nonzero(~((conic[:, 0] * conic[:, 2] - conic[:, 1] ** 2 > 0)
                                                     & (conic[:, 0] > 0)) & (opacity > cfg.support_alpha)))
    order = np.lexsort((np.arange(n), depths))
    order = order[ok[order]]
    plan = _Plan(width, height, n, order)
    ts = cfg.tile_size

    # one record per (primitive, image row) inside the footprint, depth order
    nrows = (by1[order] - by0[order] + 1).astype(np.int64)
    rg = np.repeat(order, nrows)
    ry = np.repeat(by0[order].astype(np.int64), nrows) + (
        np.arange(int(nrows.sum())) - np.repeat(np.cumsum(nrows) - nrows, nrows))
    A, B, C = conic[rg, 0], conic[rg, 1], conic[rg, 2]
    dyr = ry - means2d[rg, 1]
    # solve 0.5 A dx^2 + B dy dx + 0.5 C dy^2 <= k for dx
    disc = np.maximum((B * B - A * C) * dyr * dyr + 2.0 * A * kq[rg], 0.0)
    half = np.sqrt(disc) / A * (1 + 1e-9) + 1e-9
    cx = means2d[rg, 0] - B * dyr / A
    x0 = np.maximum(np.ceil(cx - half), 0).astype(np.int64)
    x1 = np.minimum(np.floor(cx + half), width - 1).astype(np.int64)
    cnt = np.maximum(x1 - x0 + 1, 0)

    # expand rows to pixels
    total = int(cnt.sum())
    ridx = np.repeat(np.arange(len(rg)), cnt)
    x = x0[ridx] + (np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt))
    ntx = -(-width // ts)
    xs = np.arange(width)
    xkey = (xs // ts) * (ts * ts) + xs % ts
    ys = np.arange(height)
    ykey = (ys // ts) * (ntx * ts * ts) + (ys % ts) * ts
    nkeys = -(-height // ts) * ntx * ts * ts
    key = ykey[ry][ridx] + xkey[x]

    # tile-major pixel key; a stable sort keeps depth order inside every pixel list
    key = key.astype(np.uint16 if nkeys <= 65536 else np.int64)
    perm = np.argsort(key, kind="stable")
    key = key[perm].astype(np.int64)
    ridx = ridx[perm]
    gid = rg[ridx]
    dx = x[perm] - means2d[gid, 0]
    dy = dyr[ridx]
    # same arithmetic as the brute-force reference so both apply the floor identically
    A, B, C = A[ridx], B[ridx], C[ridx]
    q = 0.5 * (A * dx * dx + C * dy * dy) + B * dx * dy
    keep = opacity[gid] * np.exp(-q) >= cfg.support_alpha
    if not keep.all():
        key, gid, dx, dy, q = key[keep], gid[keep], dx[keep], dy[keep], q[keep]
    bounds = np.searchsorted(key, np.arange(0, nkeys + 1, ts * ts))
    t = 0
    for y0 in range(0, height, ts):
        for x0_ in range(0, width, ts):
            lo, hi = bounds[t], bounds[t + 1]
            pairs = {"gid": gid[lo:hi], "pix": key[lo:hi] - t * ts * ts,
                     "dx": dx[lo:hi], "dy": dy[lo:hi], "q": q[lo:hi]}
            plan.tiles.append((y0, min(y0 + ts, height), x0_, min(x0_ + ts, width), pairs))
            t += 1
    stats.tile_pairs += len(gid)
    stats.binned += len(order)
    return plan


# ----------------------------------------------------------------------------
# per-tile math on sorted contribution lists

def _seg_exclusive(vals, start, pix):
    """Exclusive prefix sums restarting at every pixel list."""
    cs = np.cumsum(vals) - vals
    return cs - cs[start[pix]]


def _tile_forward(tile, colors, opacity, depths, bg, cfg):
    y0, y1, x0, x1, pr = tile
    ts = cfg.tile_size
    npx = ts * ts
    g, pix = pr["gid"], pr["pix"]
    e = np.exp(-pr["q"])
    araw = opacity[g] * e
    alpha = np.minimum(araw, cfg.alpha_max)
    lg = np.log1p(-alpha)
    cnt = np.bincount(pix, minlength=npx)
    start = np.cumsum(cnt) - cnt
    t_before = np.exp(_seg_exclusive(lg, start, pix))
    mask = t_before >= cfg.min_transmittance
    w = np.where(mask, alpha * t_before, 0.0)
    log_t = np.bincount(pix, weights=np.where(mask, lg, 0.0), minlength=npx)
    t_final = np.exp(log_t)
    col = np.empty((npx, 3))
    for ch in range(3):
        col[:, ch] = np.bincount(pix, weights=w * colors[g, ch], minlength=npx) + t_final * bg[ch]
    dep = np.bincount(pix, weights=w * depths[g], minlength=npx)
    state = {"e": e, "araw": araw, "alpha": alpha, "t_before": t_before, "mask": mask, "w": w,
             "t_final": t_final, "start": start}
    return col, dep, -np.expm1(log_t), state


def _tile_backward(tile, state, n, conic, colors, depths, bg, cfg, g_col, g_dep, g_alpha):
    """``g_*`` are upstream gradients over the tile's ts*ts local pixels."""
    y0, y1, x0, x1, pr = tile
    g, pix = pr["gid"], pr["pix"]
    if len(g) == 0:
        return None
    npx = cfg.tile_size ** 2
    w, alpha, araw, tb = state["w"], state["alpha"], state["araw"], state["t_before"]
    gc = g_col[pix]
    gd = g_dep[pix]
    cg, zg = colors[g], depths[g]
    H = (gc * cg).sum(axis=1) + gd * zg
    hw = H * w
    seg_total = np.bincount(pix, weights=hw, minlength=npx)
    suffix = seg_total[pix] - _seg_exclusive(hw, state["start"], pix) - hw
    tail = (g_col @ bg - g_alpha) * state["t_final"]
    d_alpha = tb * H - (suffix + tail[pix]) / (1.0 - alpha)
    d_alpha = np.where(state["mask"] & (araw < cfg.alpha_max), d_alpha, 0.0)
    d_q = -d_alpha * araw
    dx, dy = pr["dx"], pr["dy"]
    A, B, C = conic[g, 0], conic[g, 1], conic[g, 2]
    acc = lambda v: np.bincount(g, weights=v, minlength=n)
    return {
        "means2d": np.stack([acc(-d_q * (A * dx + B * dy)), acc(-d_q * (B * dx + C * dy))], axis=1),
        "conic": np.stack([acc(0.5 * d_q * dx * dx), acc(d_q * dx * dy), acc(0.5 * d_q * dy * dy)], axis=1),
        "colors": np.stack([acc(w * gc[:, ch]) for ch in range(3)], axis=1),
        "opacity": acc(d_alpha * state["e"]),
        "depths": acc(w * gd),
    }


def _map_tiles(fn, tiles, workers):
    if workers and workers > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, tiles))
    return [fn(t) for t in tiles]


def _forward(means2d, conic, colors, opacity, depths, width, height, bg, cfg):
    plan = _plan(means2d, conic, opacity, depths, width, height, cfg)
    out = np.empty((height, width, 5))
    ts = cfg.tile_size

    def run(tile):
        return _tile_forward(tile, colors, opacity, depths, bg, cfg)
    for tile, (col, dep, acc_alpha, state) in zip(plan.tiles, _map_tiles(run, plan.tiles, cfg.workers)):
        y0, y1, x0, x1, _ = tile
        h, w = y1 - y0, x1 - x0
        out[y0:y1, x0:x1, :3] = col.reshape(ts, ts, 3)[:h, :w]
        out[y0:y1, x0:x1, 3] = dep.reshape(ts, ts)[:h, :w]
        out[y0:y1, x0:x1, 4] = acc_alpha.reshape(ts, ts)[:h, :w]
        plan.cache.append(state)
    return out, plan


def rasterizer_backward(plan, means2d, conic, colors, opacity, depths, bg, cfg, grad):
    """Adjoint of the packed ``(H, W, 5)`` output [color, depth_accum, alpha].

    Returns gradients for ``means2d``, ``conic``, ``colors``, ``opacity`` and
    ``depths``. Per-tile partial sums are reduced in fixed tile order, so the
    result does not depend on the worker count.
    """
    n = len(means2d)
    acc = {"means2d": np.zeros((n, 2)), "conic": np.zeros((n, 3)), "colors": np.zeros((n, 3)),
           "opacity": np.zeros(n), "depths": np.zeros(n)}
    grad = np.asarray(grad, dtype=np.float64)
    ts = cfg.tile_size

    def run(k):
        tile = plan.tiles[k]
        y0, y1, x0, x1, _ = tile
        gt = np.zeros((ts, ts, 5))
        gt[:y1 - y0, :x1 - x0] = grad[y0:y1, x0:x1]
        gt = gt.reshape(-1, 5)
        return _tile_backward(tile, plan.cache[k], n, conic, colors, depths, bg, cfg,
                              gt[:, :3], gt[:, 3], gt[:, 4])
    for res in _map_tiles(run, range(len(plan.tiles)), cfg.workers):
        if res is None:
            continue
        for k, v in res.items():
            acc[k] += v
    return acc


def rasterize(means2d, conic, colors, opacity, depths, width, height, background, cfg=None):
    """Packed ``(H, W, 5)`` image: RGB, alpha-weighted depth sum, alpha.

    Inputs may be tape variables; the result is then a node whose adjoint is
    :func:`rasterizer_backward`.
    """
    cfg = cfg or RasterConfig()
    vals = [np.asarray(ad.value(x), dtype=np.float64) for x in (means2d, conic, colors, opacity, depths)]
    m, cn, co, op, de = vals
    op = op.reshape(-1)
    de = de.reshape(-1)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    out, plan = _forward(m, cn, co, op, de, width, height, bg, cfg)
    inputs = (means2d, conic, colors, opacity, depths)
    tape = ad._tape_of(*inputs)
    if tape is None:
        return out

    def vjp(g):
        gr = rasterizer_backward(plan, m, cn, co, op, de, bg, cfg, g)
        return (gr["means2d"], gr["conic"], gr["colors"],
                gr["opacity"].reshape(np.shape(ad.value(opacity))),
                gr["depths"].reshape(np.shape(ad.value(depths))))
    return tape.record(out, inputs, vjp, name="rasterize")


def unpack(packed, eps=1e-6):
    """Split the packed raster output into (color, normalized depth, alpha)."""
    color = packed[..., 0:3]
    dsum = packed[..., 3]
    alpha = packed[..., 4]
    av = ad.value(alpha)
    ok = av > eps
    depth = ad.where(ok, dsum / ad.where(ok, alpha, 1.0), 0.0)
    return color, depth, alpha


def _conic(cov2d):
    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    det = a * c - b * b
    bad = ~(det > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        con = np.stack(conic_from_cov(a, b, c), axis=1)
    con[bad] = 0.0  # zero conic + A == 0 marks the primitive as skipped
    return con


def render(proj: ProjectedGaussians, camera, background=(0.0, 0.0, 0.0), config=None) -> RenderOutput:
    cfg = config or RasterConfig()
    packed = rasterize(proj.means2d, _conic(proj.cov2d), proj.colors, proj.opacity, proj.depths,
                       camera.width, camera.height, background, cfg)
    color, depth, alpha = unpack(packed, cfg.depth_alpha_eps)
    return RenderOutput(color, depth, alpha)


def render_backward(proj: ProjectedGaussians, camera, background, grad_color, grad_depth=None,
                    grad_alpha=None, config=None) -> dict:
    """Gradients of a linear functional of the render w.r.t. projected inputs.

    Upstream gradients are for color, normalized depth and alpha. Returns
    gradients for ``means2d``, ``cov2d``, ``colors`` and ``opacity``
    (opacity here is the effective ``sigma * amplitude``) and ``depths``.
    """
    cfg = config or RasterConfig()
    tape = ad.Tape()
    m = tape.leaf(proj.means2d)
    cov = tape.leaf(proj.cov2d)
    col = tape.leaf(proj.colors)
    op = tape.leaf(proj.opacity)
    de = tape.leaf(proj.depths)
    con = ad.stack(conic_from_cov(cov[:, 0], cov[:, 1], cov[:, 2]), axis=1)
    packed = rasterize(m, con, col, op, de, camera.width, camera.height, background, cfg)
    color, depth, alpha = unpack(packed, cfg.depth_alpha_eps)
    h, w = camera.height, camera.width
    gd = np.zeros((h, w)) if grad_depth is None else grad_depth
    ga = np.zeros((h, w)) if grad_alpha is None else grad_alpha
    obj = (color * grad_color).sum() + (depth * gd).sum() + (alpha * ga).sum()
    g = tape.backward(obj)
    return {"means2d": g[m], "cov2d": g[cov], "colors": g[col], "opacity": g[op], "depths": g[de]}


def render_bruteforce(proj: ProjectedGaussians, camera, background=(0.0, 0.0, 0.0), config=None) -> RenderOutput:
    """Reference renderer: every primitive at every full-image pixel.

    Applies the same per-pixel rules as the tiled path, as masks rather than
    loop exits: a primitive contributes only while the pixel's transmittance
    is at least ``min_transmittance`` and only where its unclamped alpha is at
    least ``support_alpha``.
    """
    cfg = config or RasterConfig()
    h, w = camera.height, camera.width
    bg = np.asarray(background, dtype=np.float64)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    color = np.zeros((h, w, 3))
    dsum = np.zeros((h, w))
    trans = np.ones((h, w))
    log_t = np.zeros((h, w))  # alpha = 1 - trans without cancellation at faint pixels
    order = np.lexsort((np.arange(len(proj)), proj.depths))
    conic = _conic(proj.cov2d)
    for i in order:
        A, B, C = conic[i]
        if not (A * C - B * B > 0 and A > 0):
            continue
        dx = xs - proj.means2d[i, 0]
        dy = ys - proj.means2d[i, 1]
        q = 0.5 * (A * dx * dx + C * dy * dy) + B * dx * dy
        araw = proj.opacity[i] * np.exp(-q)
        alpha = np.minimum(araw, cfg.alpha_max)
        alpha = np.where((trans >= cfg.min_transmittance) & (araw >= cfg.support_alpha), alpha, 0.0)
        weight = trans * alpha
        color += weight[..., None] * proj.colors[i]
        dsum += weight * proj.depths[i]
        trans = trans * (1.0 - alpha)
        log_t += np.log1p(-alpha)
    color += trans[..., None] * bg
    alpha = -np.expm1(log_t)
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(alpha > cfg.depth_alpha_eps, dsum / alpha, 0.0)
    return RenderOutput(color, depth, alpha)
