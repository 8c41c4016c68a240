"""Explicit Gaussian scene state in unconstrained parameterization."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy.spatial import cKDTree

from .geometry import quat_to_rotation
from .sh import num_coeffs, degree_from_coeffs, rgb_to_dc


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


@dataclass
class GaussianCloud:
    """Per-primitive arrays sharing the leading dimension N.

    positions (N,3); log_scales (N,3); rotations (N,4) raw wxyz quaternions;
    sh_coeffs (N,K,3); opacity_logits (N,1); max_rate (N,1) pixels per
    scene unit, used by the 3D smoothing filter.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    sh_coeffs: np.ndarray
    opacity_logits: np.ndarray
    max_rate: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=np.float64))
        n = len(self.positions)
        shapes = {
            "positions": (n, 3), "log_scales": (n, 3), "rotations": (n, 4),
            "opacity_logits": (n, 1), "max_rate": (n, 1),
        }
        for name, shp in shapes.items():
            if getattr(self, name).shape != shp:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shp}")
        if self.sh_coeffs.ndim != 3 or self.sh_coeffs.shape[0] != n or self.sh_coeffs.shape[2] != 3:
            raise ValueError(f"sh_coeffs has shape {self.sh_coeffs.shape}, expected ({n}, K, 3)")
        degree_from_coeffs(self.sh_coeffs.shape[1])

    def __len__(self):
        return len(self.positions)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacity(self):
        return sigmoid(self.opacity_logits)

    @property
    def sh_degree(self):
        return degree_from_coeffs(self.sh_coeffs.shape[1])

    def rotation_matrices(self):
        return quat_to_rotation(self.rotations)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def subset(self, index) -> "GaussianCloud":
        return GaussianCloud(**{f.name: getattr(self, f.name)[index] for f in fields(self)})

    def arrays(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def empty(cls, sh_degree: int = 2) -> "GaussianCloud":
        k = num_coeffs(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                   np.zeros((0, k, 3)), np.zeros((0, 1)), np.ones((0, 1)))

    @classmethod
    def concat(cls, clouds) -> "GaussianCloud":
        return cls(**{f.name: np.concatenate([getattr(c, f.name) for c in clouds])
                      for f in fields(cls)})


def init_from_points(points, colors, subsample_fraction: float = 0.001, *,
                     sh_degree: int = 2, opacity: float = 0.1, seed: int = 0) -> GaussianCloud:
    """Random subset of a colored point set as isotropic Gaussians.

    Keeps ``max(1, round(M * fraction))`` points; each scale is the distance
    to the nearest retained neighbor.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    m = len(points)
    if m == 0:
        raise ValueError("cannot initialize from an empty point set")
    if len(colors) != m:
        raise ValueError(f"{len(colors)} colors for {m} points")
    if not 0 < subsample_fraction <= 1:
        raise ValueError(f"subsample_fraction must be in (0, 1], got {subsample_fraction}")
    n = max(1, int(round(m * subsample_fraction)))
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(m, size=n, replace=False)) if n < m else np.arange(m)
    pts, cols = points[keep], colors[keep]

    if n > 1:
        dist, _ = cKDTree(pts).query(pts, k=2)
        nn = dist[:, 1]
    else:
        # lone primitive: fall back to 1% of the full cloud's extent
        extent = np.ptp(points, axis=0).max()
        nn = np.array([0.01 * extent if extent > 0 else 1.0])
    nn = np.maximum(nn, 1e-7)

    k = num_coeffs(sh_degree)
    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = rgb_to_dc(cols)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianCloud(
        positions=pts,
        log_scales=np.repeat(np.log(nn)[:, None], 3, axis=1),
        rotations=rot,
        sh_coeffs=sh,
        opacity_logits=np.full((n, 1), logit(opacity)),
        max_rate=np.ones((n, 1)),
    )


def densify_and_prune(cloud: GaussianCloud, grad_accum, opacity_min: float,
                      grad_threshold: float, scale_split_threshold: float, *,
                      split_factor: float = 1.6, seed: int = 0, return_index: bool = False):
    """Adaptive density control.

    Primitives whose accumulated positional gradient exceeds
    ``grad_threshold`` are cloned (largest scale <= ``scale_split_threshold``)
    or replaced by two children sampled from the parent with scales divided
    by ``split_factor``. Afterwards primitives with opacity below
    ``opacity_min`` are removed.

    With ``return_index`` also returns, per output primitive, the index of its
    source primitive and a flag marking primitives created here.
    """
    for name, val in (("opacity_min", opacity_min), ("grad_threshold", grad_threshold),
                      ("scale_split_threshold", scale_split_threshold)):
        if not val > 0:
            raise ValueError(f"{name} must be positive, got {val}")
    grad_accum = np.asarray(grad_accum, dtype=np.float64).reshape(-1)
    n = len(cloud)
    if len(grad_accum) != n:
        raise ValueError(f"grad_accum has {len(grad_accum)} entries for {n} primitives")

    hot = grad_accum > grad_threshold
    big = cloud.scales.max(axis=1) > scale_split_threshold
    clone_idx = np.nonzero(hot & ~big)[0]
    split_idx = np.nonzero(hot & big)[0]

    keep_idx = np.nonzero(~(hot & big))[0]
    parts = [cloud.subset(keep_idx), cloud.subset(clone_idx)]
    source = [keep_idx, clone_idx]
    fresh = [np.zeros(len(keep_idx), bool), np.ones(len(clone_idx), bool)]

    if len(split_idx):
        rng = np.random.default_rng(seed)
        parent = cloud.subset(split_idx)
        R = parent.rotation_matrices()
        for _ in range(2):
            child = parent.copy()
            z = rng.standard_normal((len(split_idx), 3)) * parent.scales
            child.positions = parent.positions + np.einsum("nij,nj->ni", R, z)
            child.log_scales = parent.log_scales - np.log(split_factor)
            parts.append(child)
            source.append(split_idx)
            fresh.append(np.ones(len(split_idx), bool))

    out = GaussianCloud.concat(parts)
    source = np.concatenate(source)
    fresh = np.concatenate(fresh)

    alive = out.opacity[:, 0] >= opacity_min
    out = out.subset(np.nonzero(alive)[0])
    if return_index:
        return out, source[alive], fresh[alive]
    return out
