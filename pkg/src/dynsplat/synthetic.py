"""Self-contained dynamic teacher scenes rendered with the brute-force renderer.

The teacher is a wavy textured sheet of Gaussians facing the camera. Each
primitive moves by ``A * sin(2 pi (f t + phase + k . x))``, a travelling
wave with amplitude 3-vector ``A``. Cameras sit on a horizontal arc looking
at the origin; frame ``i`` has time ``i / (n - 1)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .antialias import ConfigError, FilterConfig
from .checkpoint import Checkpoint, save_checkpoint
from .cloud import GaussianCloud, logit
from .datasets import frame_entry, write_manifest
from .geometry import CameraModel, look_at
from .imageio import write_pfm, write_png
from .pipeline import Model, analytic_displacement, project_renderables, renderables
from .raster import RasterConfig, render_bruteforce
from .sh import rgb_to_dc

DEFAULT_AABB = ((-1.6, -1.6, -0.8), (1.6, 1.6, 0.8))


@dataclass
class SyntheticSceneSpec:
    n_gaussians: int = 2000
    n_frames: int = 24
    width: int = 64
    height: int = 64
    focal: float = 64.0
    radius: float = 3.0
    arc_degrees: float = 40.0
    elevation: float = 0.3
    amplitude: tuple = (0.04, 0.03, 0.10)
    frequency: float = 1.0
    phase: float = 0.0
    wave_vector: tuple = (0.35, 0.2, 0.0)
    extent: float = 1.15
    texture: str = "waves"  # or "checker"
    checker_cells: int = 8
    opacity: float = 0.95
    s3d: float = 0.01
    s2d: float = 0.1
    background: tuple = (0.0, 0.0, 0.0)
    aabb: tuple = DEFAULT_AABB
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 4:
            raise ConfigError(f"n_frames must be >= 4, got {self.n_frames}")
        if self.n_gaussians < 1 or self.width < 1 or self.height < 1:
            raise ConfigError("n_gaussians, width and height must be positive")
        if self.texture not in ("waves", "checker"):
            raise ConfigError(f"unknown texture {self.texture!r}")
        if len(self.amplitude) != 3 or len(self.wave_vector) != 3:
            raise ConfigError("amplitude and wave_vector must be 3-vectors")
        if not 0 < self.opacity < 1:
            raise ConfigError(f"opacity must lie in (0, 1), got {self.opacity}")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        known = set(cls.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown spec fields: {sorted(bad)}")
        d = dict(d)
        for k in ("amplitude", "wave_vector", "background"):
            if k in d:
                d[k] = tuple(float(x) for x in d[k])
        if "aabb" in d:
            d["aabb"] = tuple(tuple(float(x) for x in row) for row in d["aabb"])
        return cls(**d)

    def to_dict(self):
        return json.loads(json.dumps(asdict(self)))

    @property
    def motion(self) -> dict:
        return {"amplitude": list(map(float, self.amplitude)), "frequency": float(self.frequency),
                "phase": float(self.phase), "wave_vector": list(map(float, self.wave_vector))}


def sheet_height(x, y):
    return 0.15 * np.sin(2.0 * x) * np.cos(1.5 * y)


def texture_color(x, y, kind="waves", cells=8, extent=1.15):
    if kind == "checker":
        ix = np.floor((x + extent) / (2 * extent) * cells).astype(int)
        iy = np.floor((y + extent) / (2 * extent) * cells).astype(int)
        on = (ix + iy) % 2 == 0
        return np.where(on[:, None], [0.9, 0.85, 0.8], [0.1, 0.15, 0.2])
    r = 0.5 + 0.4 * np.sin(3.0 * x + 0.5)
    g = 0.5 + 0.35 * np.cos(2.5 * y + x)
    b = 0.5 + 0.3 * np.sin(4.0 * (x + y))
    stripe = 0.15 * np.sign(np.sin(7.0 * x - 3.0 * y))
    return np.clip(np.stack([r, g, b], axis=1) + stripe[:, None], 0.02, 0.98)


def teacher_cloud(spec: SyntheticSceneSpec) -> GaussianCloud:
    rng = np.random.default_rng(spec.seed)
    side = int(np.ceil(np.sqrt(spec.n_gaussians)))
    spacing = 2 * spec.extent / side
    g = (np.arange(side) + 0.5) * spacing - spec.extent
    xx, yy = np.meshgrid(g, g, indexing="xy")
    xy = np.stack([xx.ravel(), yy.ravel()], axis=1)[:spec.n_gaussians]
    xy = xy + rng.uniform(-0.2, 0.2, xy.shape) * spacing
    z = sheet_height(xy[:, 0], xy[:, 1])
    pos = np.column_stack([xy, z])
    n = len(pos)
    scales = np.column_stack([np.full(n, 0.6 * spacing), np.full(n, 0.6 * spacing), np.full(n, 0.15 * spacing)])
    scales *= rng.uniform(0.85, 1.15, (n, 1))
    # tilt each primitive toward the local sheet normal
    nx = -0.3 * np.cos(2.0 * xy[:, 0]) * np.cos(1.5 * xy[:, 1])
    ny = 0.225 * np.sin(2.0 * xy[:, 0]) * np.sin(1.5 * xy[:, 1])
    normal = np.column_stack([nx, ny, np.ones(n)])
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    axis = np.cross([0.0, 0.0, 1.0], normal)
    s = np.linalg.norm(axis, axis=1)
    ang = np.arcsin(np.clip(s, 0, 1))
    axis = np.where(s[:, None] > 0, axis / np.maximum(s, 1e-300)[:, None], [1.0, 0.0, 0.0])
    quat = np.column_stack([np.cos(ang / 2), axis * np.sin(ang / 2)[:, None]])
    col = texture_color(xy[:, 0], xy[:, 1], spec.texture, spec.checker_cells, spec.extent)
    col = np.clip(col + rng.normal(0, 0.02, col.shape), 0.0, 1.0)
    return GaussianCloud(
        positions=pos,
        log_scales=np.log(scales),
        rotations=quat,
        sh_coeffs=rgb_to_dc(col)[:, None, :],
        opacity_logits=np.full((n, 1), logit(spec.opacity)),
        max_rate=np.ones((n, 1)),
    )


def camera_arc(spec: SyntheticSceneSpec):
    cams = []
    angles = np.deg2rad(np.linspace(-spec.arc_degrees / 2, spec.arc_degrees / 2, spec.n_frames))
    for a in angles:
        eye = np.array([spec.radius * np.sin(a), -spec.elevation, -spec.radius * np.cos(a)])
        R, t = look_at(eye, np.zeros(3))
        cams.append(CameraModel(spec.focal, spec.focal, (spec.width - 1) / 2, (spec.height - 1) / 2,
                                spec.width, spec.height, R, t))
    return cams


def frame_times(n):
    return np.linspace(0.0, 1.0, n)


def check_containment(cloud: GaussianCloud, spec: SyntheticSceneSpec):
    lo, hi = (np.asarray(a, dtype=np.float64) for a in spec.aabb)
    amp = np.abs(np.asarray(spec.amplitude, dtype=np.float64))
    if np.any(cloud.positions - amp < lo) or np.any(cloud.positions + amp > hi):
        worst = np.max(np.maximum(lo - (cloud.positions - amp), (cloud.positions + amp) - hi))
        raise ConfigError(f"teacher motion leaves the AABB by up to {worst:.4g} scene units; "
                          "reduce the amplitude or enlarge the aabb")


def teacher_model(spec: SyntheticSceneSpec, cameras=None) -> Model:
    cloud = teacher_cloud(spec)
    check_containment(cloud, spec)
    m = Model(cloud, decoder_kind="analytic", motion=spec.motion,
              filters=FilterConfig(spec.s3d, spec.s2d), background=np.array(spec.background))
    m.update_max_rate(cameras if cameras is not None else camera_arc(spec))
    return m


def render_teacher(model: Model, camera: CameraModel, t: float, raster: RasterConfig | None = None):
    """Oracle render: dense projection and the brute-force compositor."""
    g = renderables(model, camera, t)
    proj = project_renderables(g, camera, model.filters)
    return render_bruteforce(proj, camera, model.background, raster)


def generate_synthetic(spec: SyntheticSceneSpec, out_dir, *, progress=None):
    """Write a scene directory plus ``teacher.ckpt``; returns ``(out_dir, Checkpoint)``."""
    out = Path(out_dir)
    cams = camera_arc(spec)
    model = teacher_model(spec, cams)
    times = frame_times(spec.n_frames)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(exist_ok=True)
    frames = []
    for i, (cam, t) in enumerate(zip(cams, times)):
        r = render_teacher(model, cam, float(t))
        write_png(out / "images" / f"{i:05d}.png", r.color)
        write_pfm(out / "depth" / f"{i:05d}.pfm", r.depth)
        frames.append(frame_entry(i, cam, t))
        if progress:
            progress(i, spec.n_frames)
    c0 = cams[0]
    write_manifest(out, {
        "version": 1, "width": spec.width, "height": spec.height,
        "intrinsics": {"fx": c0.fx, "fy": c0.fy, "cx": c0.cx, "cy": c0.cy},
        "near": c0.near, "far": c0.far,
        "aabb": [list(map(float, a)) for a in spec.aabb],
        "background": list(map(float, spec.background)),
        "generator": spec.to_dict(),
        "frames": frames,
    })
    ck = Checkpoint(model, 0, {"teacher": spec.to_dict()}, "teacher")
    save_checkpoint(ck, out / "teacher.ckpt")
    return out, ck
