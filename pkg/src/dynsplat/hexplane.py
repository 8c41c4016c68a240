"""Six-plane spatiotemporal feature field.

Planes are stored as ``(h, D1, D2)`` arrays in the order XY, XZ, YZ, XT, YT,
ZT. A field may hold several resolution levels; per-level features are
concatenated.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

PLANES = ("xy", "xz", "yz", "xt", "yt", "zt")
AXES = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))


def plane_key(level: int, k: int) -> str:
    return f"field.{level}.{PLANES[k]}"


@dataclass
class HexPlaneField:
    grids: dict  # plane_key -> (h, D1, D2) array
    aabb_min: np.ndarray
    aabb_max: np.ndarray
    t0: float = 0.0
    t1: float = 1.0
    levels: int = 1
    clamp_count: int = field(default=0, compare=False)

    def __post_init__(self):
        self.aabb_min = np.asarray(self.aabb_min, dtype=np.float64)
        self.aabb_max = np.asarray(self.aabb_max, dtype=np.float64)
        if np.any(self.aabb_max - self.aabb_min <= 0):
            raise ValueError(f"degenerate AABB {self.aabb_min} .. {self.aabb_max}")
        if not self.t1 > self.t0:
            raise ValueError(f"time range must satisfy t1 > t0, got [{self.t0}, {self.t1}]")
        hs = set()
        for lvl in range(self.levels):
            for k in range(6):
                g = self.grids[plane_key(lvl, k)]
                if g.ndim != 3 or min(g.shape[1:]) < 2:
                    raise ValueError(f"{plane_key(lvl, k)} has invalid shape {g.shape}")
                hs.add(g.shape[0])
        if len(hs) != 1:
            raise ValueError(f"planes disagree on feature width: {sorted(hs)}")

    @classmethod
    def create(cls, aabb_min, aabb_max, t0=0.0, t1=1.0, *, hidden=32, resolution=64,
               time_resolution=24, multipliers=(1,), seed=0, init_range=(0.9, 1.1)):
        rng = np.random.default_rng(seed)
        grids = {}
        for lvl, m in enumerate(multipliers):
            r = max(2, int(resolution * m))
            for k, (a, b) in enumerate(AXES):
                d1 = r
                d2 = r if b < 3 else max(2, int(time_resolution))
                grids[plane_key(lvl, k)] = rng.uniform(*init_range, size=(hidden, d1, d2))
        return cls(grids, aabb_min, aabb_max, t0, t1, levels=len(multipliers))

    @property
    def hidden(self) -> int:
        return self.grids[plane_key(0, 0)].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.hidden * self.levels

    def normalize(self, mu, t):
        """Affine map of the AABB and time range onto [0, 1], clamped."""
        return normalize_coords(self.aabb_min, self.aabb_max, self.t0, self.t1, mu, t, counter=self)

    def encode(self, mu, t, grids=None):
        return encode(grids if grids is not None else self.grids, self, mu, t)

    def encode_filtered(self, filtered_positions, t, grids=None):
        """Features at the configuration produced by the anti-aliasing pass.

        The filters act on primitives, not on plane features: the smoothing
        filter widens covariances and leaves centers in place, so sampling
        happens at the filtered primitives' centers with the same math as
        :meth:`encode`.
        """
        return self.encode(filtered_positions, t, grids)


def normalize_coords(lo, hi, t0, t1, mu, t, counter=None):
    mv = np.asarray(ad.value(mu), dtype=np.float64)
    raw = (mv - lo) / (hi - lo)
    tau = np.clip((np.asarray(t, dtype=np.float64) - t0) / (t1 - t0), 0.0, 1.0)
    if counter is not None:
        counter.clamp_count += int(np.count_nonzero((raw < 0) | (raw > 1)))
    xyz = ad.clip((mu - lo) / (hi - lo), 0.0, 1.0)
    return xyz, tau


def sample_plane(plane, u, v):
    """Bilinear sample of one ``(h, D1, D2)`` plane; returns ``(N, h)``."""
    return ad.bilinear_sample(plane, u, v)


def encode(grids, field_: HexPlaneField, mu, t):
    """Element-wise product of the six plane samples at (mu, t); ``(N, h*levels)``."""
    xyz, tau = normalize_coords(field_.aabb_min, field_.aabb_max, field_.t0, field_.t1, mu, t,
                                counter=field_)
    n = np.shape(ad.value(mu))[0]
    coords = [xyz[:, 0], xyz[:, 1], xyz[:, 2], np.full(n, float(tau))]
    feats = []
    for lvl in range(field_.levels):
        out = None
        for k, (a, b) in enumerate(AXES):
            s = sample_plane(grids[plane_key(lvl, k)], coords[a], coords[b])
            out = s if out is None else out * s
        feats.append(out)
    return feats[0] if len(feats) == 1 else ad.concatenate(feats, axis=1)


def total_variation(grids):
    """Sum over planes of the mean squared difference between neighboring texels."""
    total = 0.0
    for g in grids.values():
        d1 = g[:, 1:, :] - g[:, :-1, :]
        d2 = g[:, :, 1:] - g[:, :, :-1]
        total = total + ad.mean(ad.square(d1)) + ad.mean(ad.square(d2))
    return total
