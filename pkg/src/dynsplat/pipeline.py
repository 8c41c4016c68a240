"""Model container and the differentiable render path.

``Model.params()`` exposes every trainable array under a flat name. The
render functions take such a dict whose values may be plain arrays or tape
variables, so one code path serves inference and training.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .antialias import FilterConfig, ConfigError, max_sampling_rate, smoothed_scale_terms, mip_2d_terms
from .cloud import GaussianCloud
from .decoder import deform_params
from .geometry import CameraModel
from .hexplane import HexPlaneField, encode
from .raster import RasterConfig, ProjectedGaussians, conic_from_cov, rasterize, unpack
from .sh import evaluate_sh

CLOUD_KEYS = ("positions", "log_scales", "rotations", "sh_coeffs", "opacity_logits")
DECODER_KINDS = ("sad", "mlp", "none", "analytic")


@dataclass
class RenderableGaussian:
    mu: np.ndarray
    cov: np.ndarray
    color: np.ndarray
    opacity: float
    amplitude_scale: float = 1.0


@dataclass
class Model:
    cloud: GaussianCloud
    field: Optional[HexPlaneField] = None
    decoder: dict = dc_field(default_factory=dict)
    decoder_kind: str = "none"
    motion: dict = dc_field(default_factory=dict)  # analytic teacher motion
    filters: FilterConfig = dc_field(default_factory=FilterConfig)
    background: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    chunk: int = 256
    sh_head: bool = True
    support_alpha: float = 1e-9  # rasterizer footprint cutoff this model was fit with

    def raster(self, workers: int = 1) -> RasterConfig:
        return RasterConfig(support_alpha=self.support_alpha, workers=workers)

    def __post_init__(self):
        if self.decoder_kind not in DECODER_KINDS:
            raise ConfigError(f"unknown decoder kind {self.decoder_kind!r}")
        if self.decoder_kind in ("sad", "mlp") and self.field is None:
            raise ConfigError(f"decoder kind {self.decoder_kind!r} needs a HexPlane field")
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)

    def params(self) -> dict:
        p = {k: getattr(self.cloud, k) for k in CLOUD_KEYS}
        if self.field is not None and self.decoder_kind in ("sad", "mlp"):
            p.update(self.field.grids)
            p.update(self.decoder)
        return p

    def set_params(self, p: dict) -> None:
        for k in CLOUD_KEYS:
            setattr(self.cloud, k, np.asarray(p[k], dtype=np.float64))
        if self.field is not None:
            for k in self.field.grids:
                if k in p:
                    self.field.grids[k] = np.asarray(p[k], dtype=np.float64)
        for k in self.decoder:
            if k in p:
                self.decoder[k] = np.asarray(p[k], dtype=np.float64)

    def update_max_rate(self, cameras) -> None:
        self.cloud.max_rate = max_sampling_rate(cameras, self.cloud.positions).reshape(-1, 1)


# ----------------------------------------------------------------------------

def analytic_displacement(motion: dict, positions, t):
    """Per-primitive sinusoid: A * sin(2 pi (f t + phase + k . x))."""
    amp = np.asarray(motion["amplitude"], dtype=np.float64)
    k = np.asarray(motion.get("wave_vector", (0.0, 0.0, 0.0)), dtype=np.float64)
    ph = 2 * np.pi * (motion["frequency"] * t + motion.get("phase", 0.0) + positions @ k)
    return np.sin(ph)[:, None] * amp


def deformed_attributes(model: Model, p: dict, t: float, deform: bool = True):
    """Canonical attributes moved to time ``t``; returns ``(attrs, deltas)``."""
    base = {k: p[k] for k in CLOUD_KEYS}
    kind = model.decoder_kind
    if not deform or kind == "none" or len(ad.value(base["positions"])) == 0:
        return base, None
    if kind == "analytic":
        out = dict(base)
        d = analytic_displacement(model.motion, np.asarray(ad.value(base["positions"])), t)
        out["positions"] = base["positions"] + d
        return out, {"mu": d}
    feats = encode(p, model.field, base["positions"], t)
    return deform_params(base, p, feats, kind=kind, chunk=model.chunk, sh_head=model.sh_head)


def deform(cloud: GaussianCloud, field_: HexPlaneField, decoder: dict, t: float, *,
           kind="sad", chunk=256, sh_head=True, aabb=None):
    """Deformed copy of ``cloud`` at time ``t`` plus the residuals applied."""
    if aabb is not None:
        lo, hi = (np.asarray(a, dtype=np.float64) for a in aabb)
        if not (np.allclose(lo, field_.aabb_min) and np.allclose(hi, field_.aabb_max)):
            raise ConfigError("cloud AABB does not match the field's AABB")
    m = Model(cloud, field_, decoder, kind, chunk=chunk, sh_head=sh_head)
    attrs, d = deformed_attributes(m, m.params(), t)
    out = cloud.copy()
    for k in CLOUD_KEYS:
        setattr(out, k, np.array(attrs[k]))
    return out, d


def _rotation_entries(q):
    n = ad.sqrt((q * q).sum(axis=1, keepdims=True))
    q = q / n
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = ad.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=1)
    return ad.reshape(R, (-1, 3, 3))


def visible_mask(positions, camera: CameraModel):
    z = camera.world_to_cam(np.asarray(positions))[:, 2]
    return (z > camera.near) & (z < camera.far)


def project_attributes(attrs: dict, max_rate, camera: CameraModel, filters: FilterConfig):
    """Screen-space means, conic, color, effective opacity and depth.

    Returns a dict of (possibly tape) arrays for the primitives in front of
    the camera, plus their indices under ``"index"``.
    """
    pos_all = attrs["positions"]
    vis = np.nonzero(visible_mask(ad.value(pos_all), camera))[0]
    take = lambda a: ad.take_rows(a, vis)
    pos, ls, rot = take(pos_all), take(attrs["log_scales"]), take(attrs["rotations"])
    sh, ol = take(attrs["sh_coeffs"]), take(attrs["opacity_logits"])
    rate = np.asarray(max_rate).reshape(-1)[vis]

    R = _rotation_entries(rot)
    var, amp3 = smoothed_scale_terms(ls, rate, filters.s3d if filters.active3d else 0.0)
    cov3 = ad.matmul(R * ad.reshape(var, (-1, 1, 3)), ad.swapaxes(R, 1, 2))

    W, tr = camera.rotation, camera.translation
    pc = ad.matmul(pos, W.T) + tr
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    iz = 1.0 / z
    u = camera.fx * x * iz + camera.cx
    v = camera.fy * y * iz + camera.cy
    zero = np.zeros(len(vis))
    J = ad.reshape(ad.stack([
        camera.fx * iz, zero, -camera.fx * x * iz * iz,
        zero, camera.fy * iz, -camera.fy * y * iz * iz,
    ], axis=1), (-1, 2, 3))
    T = ad.matmul(J, W)
    cov2 = ad.matmul(ad.matmul(T, cov3), ad.swapaxes(T, 1, 2))
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    a, b, c, amp2 = mip_2d_terms(a, b, c, filters.s2d if filters.active2d else 0.0)

    dirs = pos - camera.center
    dirs = dirs / ad.sqrt((dirs * dirs).sum(axis=1, keepdims=True))
    colors = evaluate_sh(sh, dirs)

    opacity = ad.sigmoid(ol[:, 0])
    if amp3 is not None:
        opacity = opacity * amp3
    if amp2 is not None:
        opacity = opacity * amp2
    return {
        "means2d": ad.stack([u, v], axis=1),
        "cov2d": (a, b, c),
        "colors": colors,
        "opacity": opacity,
        "depths": z,
        "index": vis,
    }


@dataclass
class Frame:
    color: object
    depth: object
    alpha: object
    deltas: Optional[dict]
    screen: dict


def render_frame(model: Model, p: dict, camera: CameraModel, t: float, *,
                 deform: bool = True, raster: RasterConfig | None = None,
                 filters: FilterConfig | None = None) -> Frame:
    raster = raster or model.raster()
    filters = filters or model.filters
    attrs, deltas = deformed_attributes(model, p, t, deform)
    scr = project_attributes(attrs, model.cloud.max_rate, camera, filters)
    a, b, c = scr["cov2d"]
    conic = ad.stack(conic_from_cov(a, b, c), axis=1)
    packed = rasterize(scr["means2d"], conic, scr["colors"], scr["opacity"], scr["depths"],
                       camera.width, camera.height, model.background, raster)
    color, depth, alpha = unpack(packed, raster.depth_alpha_eps)
    return Frame(color, depth, alpha, deltas, scr)


def render_model(model: Model, camera: CameraModel, t: float, **kw):
    """Forward-only render with the model's own parameters (plain arrays)."""
    f = render_frame(model, model.params(), camera, t, **kw)
    return f.color, f.depth, f.alpha


def projected_gaussians(model: Model, camera: CameraModel, t: float,
                        filters: FilterConfig | None = None) -> ProjectedGaussians:
    """Screen-space primitives at time ``t`` (forward only)."""
    attrs, _ = deformed_attributes(model, model.params(), t)
    scr = project_attributes(attrs, model.cloud.max_rate, camera, filters or model.filters)
    a, b, c = scr["cov2d"]
    return ProjectedGaussians(scr["means2d"], np.stack([a, b, c], axis=1), scr["colors"],
                              scr["opacity"], scr["depths"])


def renderables(model: Model, camera: CameraModel, t: float) -> list[RenderableGaussian]:
    """World-space primitives at ``t`` with SH colors and 3D-filter amplitudes."""
    from .antialias import smooth_3d
    from .geometry import build_covariance
    attrs, _ = deformed_attributes(model, model.params(), t)
    pos = np.asarray(attrs["positions"])
    cov = build_covariance(np.exp(attrs["log_scales"]), attrs["rotations"])
    sig = 1.0 / (1.0 + np.exp(-np.asarray(attrs["opacity_logits"])[:, 0]))
    if model.filters.active3d:
        cov, amp = smooth_3d(cov, sig, model.cloud.max_rate[:, 0], model.filters.s3d)
    else:
        amp = np.ones(len(pos))
    dirs = pos - camera.center
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    cols = evaluate_sh(np.asarray(attrs["sh_coeffs"]), dirs)
    return [RenderableGaussian(pos[i], cov[i], cols[i], float(sig[i]), float(amp[i])) for i in range(len(pos))]


def project_renderables(gaussians, camera: CameraModel, filters: FilterConfig) -> ProjectedGaussians:
    """Project world-space renderables with the dense geometry routines."""
    from .antialias import mip_2d
    from .geometry import project_covariance, project_point
    if not gaussians:
        return ProjectedGaussians(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0))
    mu = np.stack([g.mu for g in gaussians])
    cov = np.stack([g.cov for g in gaussians])
    pr = project_point(camera, mu)
    keep = pr.valid & (pr.depth < camera.far)
    cov2, _ = project_covariance(camera, cov[keep], mu[keep])
    amp2 = np.ones(len(cov2))
    if filters.active2d:
        cov2, amp2 = mip_2d(cov2, filters.s2d)
    op = np.array([g.opacity * g.amplitude_scale for g in gaussians])[keep] * amp2
    return ProjectedGaussians(
        np.stack([pr.u[keep], pr.v[keep]], axis=1),
        np.stack([cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]], axis=1),
        np.stack([g.color for g in gaussians])[keep], op, pr.depth[keep])
