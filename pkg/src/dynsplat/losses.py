"""Training objective: weighted sum of color, depth, grid smoothness and motion smoothness."""
from __future__ import annotations

import warnings

import numpy as np

from . import autodiff as ad
from .hexplane import total_variation


def color_loss(color, target, ignore=None):
    err = ad.abs_(color - target)
    if ignore is None or not np.any(ignore):
        return ad.mean(err)
    keep = (~np.asarray(ignore, bool)).astype(np.float64)[..., None]
    n = keep.sum() * 3
    if n == 0:
        return ad.sum_(err * 0.0)
    return ad.sum_(err * keep) / n


def depth_loss(depth, target, ignore=None):
    """Mean absolute depth error over pixels with a finite positive target."""
    target = np.asarray(target, dtype=np.float64)
    valid = np.isfinite(target) & (target > 0)
    if ignore is not None:
        valid &= ~np.asarray(ignore, bool)
    n = int(valid.sum())
    if n == 0:
        warnings.warn("depth target has no valid pixels; depth loss set to 0", stacklevel=2)
        return 0.0
    tgt = np.where(valid, target, 0.0)
    return ad.sum_(ad.abs_(depth - tgt) * valid.astype(np.float64)) / n


def temporal_loss(delta_mu, delta_mu_prev):
    if delta_mu is None or delta_mu_prev is None:
        return 0.0
    return ad.mean(ad.square(delta_mu - delta_mu_prev))


def loss(color, depth, target_color, target_depth, grids, delta_mu, delta_mu_prev, cfg, ignore=None):
    """Returns ``(total, terms)`` where ``terms`` maps each term name to a float."""
    terms = {
        "L_color": color_loss(color, target_color, ignore),
        "L_depth": depth_loss(depth, target_depth, ignore) if target_depth is not None else 0.0,
        "L_spatial": total_variation(grids) if grids else 0.0,
        "L_temporal": temporal_loss(delta_mu, delta_mu_prev),
    }
    w = {"L_color": cfg.lambda_color, "L_depth": cfg.lambda_depth,
         "L_spatial": cfg.lambda_spatial, "L_temporal": cfg.lambda_temporal}
    total = 0.0
    for k, v in terms.items():
        if w[k] != 0:
            total = total + w[k] * v
    return total, {k: float(ad.value(v)) for k, v in terms.items()}
