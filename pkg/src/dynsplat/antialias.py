"""3D smoothing filter and 2D screen-space Mip filter.

The filter sizes are called ``s3d`` and ``s2d`` here; the Gaussian scale
vector is ``scales``. The 3D filter adds ``s3d / max_rate`` times the
identity to each covariance, where ``max_rate`` is the primitive's highest
sampling rate (pixels per scene unit) over the training cameras.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .geometry import CameraModel


class ConfigError(ValueError):
    pass


@dataclass
class FilterConfig:
    s3d: float = 0.01
    s2d: float = 0.1
    enable3d: bool = True
    enable2d: bool = True

    def __post_init__(self):
        if self.s3d < 0 or self.s2d < 0:
            raise ConfigError(f"filter sizes must be >= 0, got s3d={self.s3d}, s2d={self.s2d}")

    @property
    def active3d(self) -> bool:
        return self.enable3d and self.s3d > 0

    @property
    def active2d(self) -> bool:
        return self.enable2d and self.s2d > 0

    def to_dict(self):
        return asdict(self)


def max_sampling_rate(cameras, mu, margin: float = 0.15):
    """Per-point max over cameras of focal / depth, among cameras that see it.

    A point counts as visible when it lies between the clip planes and its
    projection falls inside the image grown by ``margin`` on every side.
    Points seen by no camera get ``max(focal / far)``.
    """
    if not cameras:
        raise ConfigError("max_sampling_rate needs at least one camera")
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    best = np.zeros(len(mu))
    for cam in cameras:
        pc = cam.world_to_cam(mu)
        z = pc[:, 2]
        zs = np.where(z > 0, z, 1.0)
        u = cam.fx * pc[:, 0] / zs + cam.cx
        v = cam.fy * pc[:, 1] / zs + cam.cy
        mw, mh = margin * cam.width, margin * cam.height
        vis = ((z > cam.near) & (z < cam.far)
               & (u >= -0.5 - mw) & (u <= cam.width - 0.5 + mw)
               & (v >= -0.5 - mh) & (v <= cam.height - 0.5 + mh))
        best = np.where(vis, np.maximum(best, cam.focal / zs), best)
    floor = max(cam.focal / cam.far for cam in cameras)
    return np.where(best > 0, best, floor)


def smooth_3d(cov, opacity, max_rate, s3d):
    """Widen ``cov`` by ``s3d / max_rate`` * I; returns ``(cov', amplitude_scale)``.

    The amplitude keeps the integrated mass of the Gaussian fixed:
    sqrt(|cov| / |cov'|). ``opacity`` is accepted for symmetry with the
    renderable form; the effective opacity is ``opacity * amplitude_scale``.
    """
    cov = np.asarray(cov, dtype=np.float64)
    if s3d == 0:
        return cov.copy(), np.ones(cov.shape[:-2])
    c = s3d / np.asarray(max_rate, dtype=np.float64)
    out = cov + np.asarray(c)[..., None, None] * np.eye(3)
    amp = np.sqrt(np.linalg.det(cov) / np.linalg.det(out))
    return out, amp


def mip_2d(cov2, s2d):
    """Screen-space dilation by ``s2d`` * I with mass-preserving amplitude."""
    cov2 = np.asarray(cov2, dtype=np.float64)
    if s2d == 0:
        return cov2.copy(), np.ones(cov2.shape[:-2])
    out = cov2 + s2d * np.eye(2)
    amp = np.sqrt(np.maximum(np.linalg.det(cov2), 0.0) / np.linalg.det(out))
    return out, amp


# ----------------------------------------------------------------------------
# differentiable forms used by the rendering pipeline

def smoothed_scale_terms(log_scales, max_rate, s3d):
    """Per-axis variances ``s^2 + c`` and the 3D amplitude for ``R diag(s) R^T``.

    For a rotated diagonal covariance the determinant ratio factorizes per
    axis, so the amplitude is ``sqrt(prod s_i^2 / (s_i^2 + c))``.
    """
    var = ad.exp(2.0 * log_scales)
    if s3d == 0:
        return var, None
    c = s3d / np.asarray(max_rate, dtype=np.float64).reshape(-1, 1)
    widened = var + c
    ratio = var / widened
    amp = ad.sqrt(ratio[:, 0] * ratio[:, 1] * ratio[:, 2])
    return widened, amp


def mip_2d_terms(a, b, c, s2d):
    """2D covariance entries ``[[a, b], [b, c]]`` after Mip filtering, and amplitude."""
    if s2d == 0:
        return a, b, c, None
    a2, c2 = a + s2d, c + s2d
    det0 = a * c - b * b
    det1 = a2 * c2 - b * b
    # floor keeps sqrt's adjoint finite for degenerate footprints
    det0 = ad.where(ad.value(det0) > 1e-30, det0, 1e-30)
    amp = ad.sqrt(det0 / det1)
    return a2, b, c2, amp
