"""Pinhole cameras, quaternions, covariance construction and EWA projection.

Conventions: camera space is +z forward, +x right, +y down; pixel centers
sit at integer coordinates ``(u, v)`` with ``u`` the column index. Depth
maps are row-major with a top-left origin.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or np.linalg.det(R) < 0:
            raise ValueError("world_to_camera rotation must be orthonormal with det +1")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def focal(self) -> float:
        return max(self.fx, self.fy)

    def world_to_cam(self, pts):
        return np.asarray(pts, dtype=np.float64) @ self.rotation.T + self.translation

    def scaled(self, factor: float) -> "CameraModel":
        """Same pose, image resampled by ``factor`` (pixel centers preserved)."""
        w = int(round(self.width * factor))
        h = int(round(self.height * factor))
        return CameraModel(
            self.fx * factor, self.fy * factor,
            (self.cx + 0.5) * factor - 0.5, (self.cy + 0.5) * factor - 0.5,
            w, h, self.rotation, self.translation, self.near, self.far,
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
            "near": self.near, "far": self.far,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
                   np.array(d["rotation"]), np.array(d["translation"]), d.get("near", 0.01), d.get("far", 100.0))


def look_at(eye, target, up=(0.0, -1.0, 0.0)):
    """World-to-camera ``(R, t)`` for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    # default up=-y matches the +y-down camera frame: identity pose for eye at origin
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return R, -R @ eye


# ----------------------------------------------------------------------------
# quaternions and covariance

def normalize_quaternion(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise DegenerateInputError("zero-norm quaternion")
    return q / n


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix for a (w, x, y, z) quaternion; batched over leading axes."""
    w, x, y, z = np.moveaxis(normalize_quaternion(q), -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(np.shape(w) + (3, 3))


def build_covariance(scales, q) -> np.ndarray:
    """Sigma = R S S^T R^T."""
    s = np.asarray(scales, dtype=np.float64)
    if np.any(s <= 0):
        raise DegenerateInputError("scales must be strictly positive")
    R = quat_to_rotation(q)
    M = R * s[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


# ----------------------------------------------------------------------------
# projection

class Projection(NamedTuple):
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    valid: np.ndarray  # False for points at or behind the near plane


def project_point(cam: CameraModel, mu) -> Projection:
    pc = cam.world_to_cam(mu)
    x, y, z = np.moveaxis(pc, -1, 0)
    valid = z > cam.near
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * x / z + cam.cx
        v = cam.fy * y / z + cam.cy
    return Projection(u, v, z, valid)


def projection_jacobian(cam: CameraModel, p_cam):
    """Local affine (EWA) Jacobian of the pinhole map at camera-space points.

    Returns ``(J, valid)`` with ``J`` of shape ``(..., 2, 3)``.
    """
    x, y, z = np.moveaxis(np.asarray(p_cam, dtype=np.float64), -1, 0)
    valid = z > cam.near
    zs = np.where(valid, z, 1.0)
    zero = np.zeros_like(zs)
    J = np.stack([
        cam.fx / zs, zero, -cam.fx * x / zs ** 2,
        zero, cam.fy / zs, -cam.fy * y / zs ** 2,
    ], axis=-1).reshape(np.shape(zs) + (2, 3))
    return J, valid


def project_covariance(cam: CameraModel, cov3, mu):
    """Sigma' = J W Sigma W^T J^T; returns ``(cov2, valid)``."""
    J, valid = projection_jacobian(cam, cam.world_to_cam(mu))
    T = J @ cam.rotation
    cov2 = T @ np.asarray(cov3, dtype=np.float64) @ np.swapaxes(T, -1, -2)
    cov2 = 0.5 * (cov2 + np.swapaxes(cov2, -1, -2))
    return cov2, valid


def backproject_depth(cam: CameraModel, depth, color=None, stride: int = 1):
    """Lift sampled pixels with finite positive depth to world points.

    Returns ``(points, colors)``; ``colors`` is None when no image is given.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if depth.shape != (cam.height, cam.width):
        raise ValueError(f"depth shape {depth.shape} does not match camera {(cam.height, cam.width)}")
    if color is not None and np.shape(color)[:2] != depth.shape:
        raise ValueError(f"color shape {np.shape(color)} does not match depth {depth.shape}")
    vs, us = np.mgrid[0:cam.height:stride, 0:cam.width:stride]
    d = depth[vs, us]
    ok = np.isfinite(d) & (d > 0)
    if not ok.any():
        warnings.warn("backproject_depth: no valid depth samples", RuntimeWarning, stacklevel=2)
    us, vs, d = us[ok].astype(np.float64), vs[ok].astype(np.float64), d[ok]
    rays = np.stack([(us - cam.cx) / cam.fx, (vs - cam.cy) / cam.fy, np.ones_like(us)], axis=-1)
    pc = rays * d[:, None]
    pts = (pc - cam.translation) @ cam.rotation  # R^T (pc - t), row form
    cols = None
    if color is not None:
        cols = np.asarray(color, dtype=np.float64)[vs.astype(int), us.astype(int)]
    return pts, cols
