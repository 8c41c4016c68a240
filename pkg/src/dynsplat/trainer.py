"""Optimization loop, evaluation and the ablation harness."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, save_checkpoint
from .cloud import GaussianCloud, init_from_points, densify_and_prune
from .config import TrainConfig
from .datasets import SceneDataset
from .decoder import init_params
from .geometry import backproject_depth
from .hexplane import HexPlaneField
from .losses import loss
from .metrics import MetricReport, psnr, ssim
from .optim import Adam
from .pipeline import CLOUD_KEYS, Model, render_frame, render_model
from .raster import RasterConfig

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "loss", "L_color", "L_depth", "L_spatial", "L_temporal", "psnr_train", "wall_ms")
ABLATION_MODES = ("baseline", "no_filters", "no_sad", "full")  # table row order


class TrainingAborted(RuntimeError):
    def __init__(self, message, checkpoint: Checkpoint, iteration: int):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.iteration = iteration


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list = field(default_factory=list)


# ----------------------------------------------------------------------------
# model construction

def initial_points(dataset: SceneDataset, stride: int):
    """Back-project every training frame's depth; ignored pixels are skipped."""
    pts, cols = [], []
    for i in dataset.train_indices:
        depth = np.where(dataset.ignore_mask(i), np.nan, dataset.depth(i))
        p, c = backproject_depth(dataset.frames[i].camera, depth, dataset.image(i), stride=stride)
        pts.append(p)
        cols.append(c)
    pts, cols = np.concatenate(pts), np.concatenate(cols)
    if len(pts) == 0:
        raise ValueError("no valid depth pixels in the training frames")
    return pts, cols


def scene_aabb(dataset: SceneDataset, points):
    if dataset.aabb is not None:
        return dataset.aabb[0], dataset.aabb[1]
    lo, hi = points.min(axis=0), points.max(axis=0)
    pad = 0.1 * np.maximum(hi - lo, 1e-3)
    return lo - pad, hi + pad


def build_model(dataset: SceneDataset, cfg: TrainConfig) -> Model:
    pts, cols = initial_points(dataset, cfg.init_stride)
    cloud = init_from_points(pts, cols, cfg.init_fraction, sh_degree=cfg.sh_degree,
                             opacity=cfg.init_opacity, seed=cfg.seed)
    lo, hi = scene_aabb(dataset, pts)
    times = dataset.times
    t0, t1 = float(times.min()), float(times.max())
    if not t1 > t0:
        t1 = t0 + 1.0
    fld, dec = None, {}
    if cfg.decoder in ("sad", "mlp"):
        fld = HexPlaneField.create(lo, hi, t0, t1, hidden=cfg.hidden, resolution=cfg.resolution,
                                   time_resolution=cfg.time_resolution, multipliers=cfg.multipliers,
                                   seed=cfg.seed + 1)
        dec = init_params(fld.feature_dim, heads_count=cfg.heads, mlp_ratio=cfg.mlp_ratio,
                          gamma_init=cfg.gamma_init, seed=cfg.seed + 2, kind=cfg.decoder,
                          sh_head=cfg.sh_head)
    m = Model(cloud, fld, dec, cfg.decoder, filters=cfg.filters(), background=dataset.background,
              chunk=cfg.chunk, sh_head=cfg.sh_head, support_alpha=cfg.support_alpha)
    m.update_max_rate([dataset.frames[i].camera for i in dataset.train_indices])
    return m


def make_checkpoint(model: Model, cfg: TrainConfig, iteration: int, opt: Optional[Adam] = None) -> Checkpoint:
    st = opt.state() if opt is not None else {}
    st.pop("t", None)
    return Checkpoint(_snapshot(model), iteration, cfg.to_dict(), cfg.hash(), st)


def _snapshot(model: Model) -> Model:
    f = model.field
    fld = None if f is None else HexPlaneField({k: v.copy() for k, v in f.grids.items()},
                                               f.aabb_min, f.aabb_max, f.t0, f.t1, f.levels)
    return Model(model.cloud.copy(), fld, {k: v.copy() for k, v in model.decoder.items()},
                 model.decoder_kind, dict(model.motion), model.filters, model.background.copy(),
                 model.chunk, model.sh_head, model.support_alpha)


# ----------------------------------------------------------------------------
# training

def _schedule(cfg: TrainConfig, it: int) -> bool:
    return (cfg.densify_start <= it <= cfg.densify_stop and it % cfg.densify_interval == 0)


def _lr_at(cfg: TrainConfig, it: int) -> float:
    if cfg.lr_final_factor == 1.0 or cfg.total_iters <= 1:
        return cfg.lr
    return cfg.lr * cfg.lr_final_factor ** ((it - 1) / (cfg.total_iters - 1))


class _Log:
    def __init__(self, path, wall: bool):
        self.fh = open(path, "w", newline="") if path else None
        self.wall = wall
        if self.fh:
            self.w = csv.writer(self.fh)
            self.w.writerow(LOG_COLUMNS)

    def row(self, it, total, terms, p, ms):
        if not self.fh:
            return
        fmt = lambda x: repr(float(x))
        self.w.writerow([it, fmt(total), fmt(terms["L_color"]), fmt(terms["L_depth"]),
                         fmt(terms["L_spatial"]), fmt(terms["L_temporal"]), fmt(p),
                         f"{ms:.3f}" if self.wall else ""])
        self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def train(dataset: SceneDataset, cfg: TrainConfig, *, log_path=None, progress=None,
          model: Optional[Model] = None) -> TrainResult:
    """Warm-up on static Gaussians, then joint optimization with the deformation network.

    Raises :class:`TrainingAborted` (carrying the last good checkpoint) when
    the loss becomes non-finite.
    """
    if len(np.unique(dataset.times)) < 2:
        raise ValueError("training needs at least two distinct timestamps")
    train_ids = dataset.train_indices
    if not train_ids:
        raise ValueError("dataset has no training frames")
    model = model or build_model(dataset, cfg)
    cams = [dataset.frames[i].camera for i in train_ids]
    times = [dataset.frames[i].time for i in train_ids]
    raster = cfg.raster()
    opt = Adam(cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.lr_mult)
    grids_keys = sorted(model.field.grids) if model.field is not None else []
    deform_keys = grids_keys + sorted(model.decoder)

    n = len(model.cloud)
    acc = np.zeros(n)
    cnt = np.zeros(n)
    history = []
    prev_mu = None  # detached position residuals from the previous iteration
    logger = _Log(log_path, cfg.log_wall_time)
    try:
        for it in range(1, cfg.total_iters + 1):
            t_start = time.perf_counter()
            warm = it <= cfg.warmup_iters
            j = (it - 1) % len(train_ids)
            fi = train_ids[j]
            cam, t = cams[j], times[j]

            params = model.params()
            active = list(CLOUD_KEYS) + ([] if warm else deform_keys)
            tape = ad.Tape()
            p = dict(params)
            for k in active:
                p[k] = tape.leaf(params[k], name=k)

            fr = render_frame(model, p, cam, t, deform=not warm, raster=raster)
            # round-robin order means the previous iteration saw the previous
            # timestamp; its residuals serve as a fixed target (none across the
            # wrap-around or after the cloud was resized)
            d_mu = fr.deltas["mu"] if fr.deltas is not None else None
            d_prev = prev_mu if (j > 0 and prev_mu is not None and d_mu is not None
                                 and prev_mu.shape == np.shape(ad.value(d_mu))) else None
            if d_mu is not None:
                prev_mu = np.array(ad.value(d_mu))
            grids = {k: p[k] for k in grids_keys} if (not warm and cfg.lambda_spatial > 0) else {}
            target = dataset.image(fi)
            total, terms = loss(fr.color, fr.depth, target, dataset.depth(fi), grids, d_mu, d_prev, cfg,
                                ignore=dataset.ignore_mask(fi))
            tv = float(ad.value(total))
            if not math.isfinite(tv):
                ck = make_checkpoint(model, cfg, it - 1, opt)
                raise TrainingAborted(f"non-finite loss {tv} at iteration {it} (frame {fi}, t={t})", ck, it)

            if isinstance(total, ad.Var):
                means2d = fr.screen["means2d"]
                g = tape.backward(total, retain=[means2d] if isinstance(means2d, ad.Var) else [])
                grads = {k: g[p[k]] for k in active if p[k] in g}
                bad = [k for k, v in grads.items() if not np.all(np.isfinite(v))]
                if bad:
                    ck = make_checkpoint(model, cfg, it - 1, opt)
                    raise TrainingAborted(f"non-finite gradient for {bad} at iteration {it}", ck, it)
                opt.lr = _lr_at(cfg, it)
                model.set_params(opt.step(params, grads))
                if means2d in g:
                    vis = fr.screen["index"]
                    acc[vis] += np.linalg.norm(g[means2d], axis=1)
                    cnt[vis] += 1

            ptrain = psnr(np.clip(ad.value(fr.color), 0, 1), target)
            ms = (time.perf_counter() - t_start) * 1000.0
            history.append({"iter": it, "loss": tv, **terms, "psnr_train": ptrain})
            logger.row(it, tv, terms, ptrain, ms)
            if progress:
                progress(it, tv, ptrain)

            if _schedule(cfg, it) and it < cfg.total_iters:
                acc, cnt = _densify(model, opt, acc, cnt, cfg, it, cams)
    finally:
        logger.close()
    return TrainResult(make_checkpoint(model, cfg, cfg.total_iters, opt), history)


def _densify(model, opt, acc, cnt, cfg, it, cams):
    cloud = model.cloud
    mean = np.where(cnt > 0, acc / np.maximum(cnt, 1), 0.0)
    thr = cfg.densify_grad_threshold
    budget = max(0, cfg.max_gaussians - len(cloud))
    hot = np.count_nonzero(mean > thr)
    if hot > budget:
        # keep only the strongest candidates within the size budget
        thr = np.sort(mean)[::-1][budget] if budget < len(mean) else thr
        thr = max(thr, cfg.densify_grad_threshold)
    extent = float(np.max(np.ptp(cloud.positions, axis=0))) if len(cloud) > 1 else 1.0
    new, source, fresh = densify_and_prune(cloud, mean, cfg.opacity_min, thr,
                                           cfg.scale_split_fraction * max(extent, 1e-6),
                                           seed=cfg.seed + it, return_index=True)
    if len(new) == 0:
        log.warning("densify_and_prune removed every primitive at iteration %d; keeping the old cloud", it)
        return acc, cnt
    model.cloud = new
    model.update_max_rate(cams)
    opt.remap_rows(CLOUD_KEYS, source, fresh)
    log.info("iteration %d: %d -> %d Gaussians", it, len(cloud), len(new))
    return np.zeros(len(new)), np.zeros(len(new))


# ----------------------------------------------------------------------------
# evaluation and ablation

def evaluate(model: Model, dataset: SceneDataset, split="test", raster: Optional[RasterConfig] = None,
             with_ssim: bool = True) -> MetricReport:
    rep = MetricReport()
    for i in dataset.indices(split):
        f = dataset.frames[i]
        color, _, _ = render_model(model, f.camera, f.time, raster=raster)
        color = np.clip(color, 0.0, 1.0)
        tgt = dataset.image(i)
        rep.add(i, psnr(color, tgt), ssim(color, tgt) if with_ssim else float("nan"))
    return rep


def mode_config(cfg: TrainConfig, mode: str) -> TrainConfig:
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")
    no_filters = mode in ("no_filters", "baseline")
    no_sad = mode in ("no_sad", "baseline")
    return cfg.replace(enable3d=not no_filters and cfg.enable3d, enable2d=not no_filters and cfg.enable2d,
                       decoder="mlp" if no_sad else "sad")


def ablate(dataset: SceneDataset, cfg: TrainConfig, modes=ABLATION_MODES, progress=None) -> list:
    """Train each mode with the shared seed; rows of mode, PSNR, SSIM, LPIPS."""
    rows = []
    for mode in modes:
        mc = mode_config(cfg, mode)
        res = train(dataset, mc, progress=(lambda *a, m=mode: progress(m, *a)) if progress else None)
        rep = evaluate(res.checkpoint.model, dataset, "test")
        rows.append({"mode": mode, "psnr": rep.mean_psnr, "ssim": rep.mean_ssim, "lpips": "n/a",
                     "config_hash": mc.hash(), "gaussians": len(res.checkpoint.model.cloud)})
    return rows


def format_table(rows) -> str:
    labels = {"baseline": "Baseline", "no_filters": "w/o Alias-Free", "no_sad": "w/o SAD", "full": "Full"}
    out = [f"{'Model':<16}{'PSNR':>9}{'SSIM':>9}{'LPIPS':>7}"]
    for r in rows:
        out.append(f"{labels[r['mode']]:<16}{r['psnr']:>9.3f}{r['ssim']:>9.4f}{r['lpips']:>7}")
    return "\n".join(out)
