"""Scene directories: ``scene.json`` plus images, depths and optional masks.

Manifest layout (all paths relative to the scene directory)::

    {
      "version": 1,
      "width": 64, "height": 64,
      "intrinsics": {"fx": 64, "fy": 64, "cx": 31.5, "cy": 31.5},
      "near": 0.01, "far": 100.0,
      "aabb": [[-1.6, -1.6, -0.8], [1.6, 1.6, 0.8]],        # optional hint
      "background": [0, 0, 0],                               # optional
      "stereo": {"baseline": 0.05, "disparity_scale": 1.0},  # optional
      "split": {"train": [...], "test": [...]},              # optional
      "frames": [
        {"image": "images/00000.png", "depth": "depth/00000.pfm",
         "mask": "masks/00000.png", "time": 0.0,
         "rotation": [[...], [...], [...]], "translation": [...],
         "intrinsics": {...}}                                 # optional override
      ]
    }

A frame may give ``"disparity"`` instead of ``"depth"`` (EndoNeRF-style
rectified stereo). Depth is then ``fx * baseline / (disparity_scale * d)``
and non-positive disparities are invalid. Mask pixels that are nonzero are
ignored by the losses (tool occlusion). Without an explicit split every 8th
frame (index % 8 == 0) is held out for testing.
"""
from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import CameraModel
from .imageio import read_pfm, read_png, ImageFormatError

MANIFEST = "scene.json"


class SceneError(ValueError):
    pass


@dataclass
class FrameRecord:
    image: Path
    depth: Optional[Path]
    camera: CameraModel
    time: float
    mask: Optional[Path] = None
    disparity: Optional[Path] = None
    split: str = "train"


@dataclass
class SceneDataset:
    root: Path
    frames: list
    aabb: Optional[np.ndarray] = None
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    stereo: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self):
        return len(self.frames)

    @property
    def times(self):
        return np.array([f.time for f in self.frames])

    @property
    def cameras(self):
        return [f.camera for f in self.frames]

    def indices(self, split: str):
        if split == "all":
            return list(range(len(self.frames)))
        return [i for i, f in enumerate(self.frames) if f.split == split]

    @property
    def train_indices(self):
        return self.indices("train")

    @property
    def test_indices(self):
        return self.indices("test")

    def image(self, i):
        key = ("image", i)
        if key not in self._cache:
            self._cache[key] = read_png(self.frames[i].image)
        return self._cache[key]

    def depth(self, i):
        """Depth map with invalid pixels (non-finite or <= 0) set to NaN."""
        key = ("depth", i)
        if key not in self._cache:
            f = self.frames[i]
            if f.depth is not None:
                d = read_pfm(f.depth)
            elif f.disparity is not None:
                d = disparity_to_depth(self._read_disparity(f.disparity), f.camera.fx,
                                       self.stereo.get("baseline", 0.0),
                                       self.stereo.get("disparity_scale", 1.0))
            else:
                d = np.full((f.camera.height, f.camera.width), np.nan)
            d = np.where(np.isfinite(d) & (d > 0), d, np.nan)
            self._cache[key] = d
        return self._cache[key]

    def _read_disparity(self, path: Path):
        if path.suffix.lower() == ".pfm":
            return read_pfm(path)
        return read_png(path, mode="L") * 255.0

    def ignore_mask(self, i):
        """Boolean (H, W) array, True where the pixel is excluded from losses."""
        key = ("mask", i)
        if key not in self._cache:
            f = self.frames[i]
            if f.mask is None:
                m = np.zeros((f.camera.height, f.camera.width), bool)
            else:
                m = read_png(f.mask, mode="L") > 0
            self._cache[key] = m
        return self._cache[key]


def disparity_to_depth(disp, fx, baseline, scale=1.0):
    disp = np.asarray(disp, dtype=np.float64) * scale
    if baseline <= 0:
        raise SceneError(f"stereo baseline must be > 0, got {baseline}")
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(disp > 0, fx * baseline / np.where(disp > 0, disp, 1.0), np.nan)


def _camera(entry, intr, w, h, near, far, name):
    try:
        return CameraModel(
            fx=float(intr["fx"]), fy=float(intr["fy"]), cx=float(intr["cx"]), cy=float(intr["cy"]),
            width=int(w), height=int(h),
            rotation=np.asarray(entry["rotation"], dtype=np.float64),
            translation=np.asarray(entry["translation"], dtype=np.float64),
            near=float(near), far=float(far))
    except (KeyError, TypeError, ValueError) as e:
        raise SceneError(f"{name}: invalid camera ({e})") from e


def load_scene(path, *, check_images: bool = True) -> SceneDataset:
    root = Path(path)
    mf = root / MANIFEST
    if not root.is_dir():
        raise SceneError(f"scene directory not found: {root}")
    if not mf.is_file():
        raise SceneError(f"missing manifest {mf}")
    try:
        meta = json.loads(mf.read_text())
    except json.JSONDecodeError as e:
        raise SceneError(f"{mf}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    entries = meta.get("frames")
    if not entries:
        raise SceneError(f"{mf}: no frames listed")
    W, H = meta.get("width"), meta.get("height")
    intr0 = meta.get("intrinsics")
    near, far = meta.get("near", 0.01), meta.get("far", 100.0)

    split = meta.get("split")
    test_set = set(split.get("test", [])) if split else None

    frames = []
    prev_t = -np.inf
    for i, e in enumerate(entries):
        name = f"frame {i}"
        intr = e.get("intrinsics", intr0)
        if intr is None:
            raise SceneError(f"{name}: no intrinsics")
        cam = _camera(e, intr, e.get("width", W), e.get("height", H), near, far, name)
        t = float(e.get("time", i))
        if t < prev_t:
            raise SceneError(f"{name}: timestamp {t} decreases (previous {prev_t})")
        prev_t = t
        rec = FrameRecord(image=root / e["image"], depth=None, camera=cam, time=t)
        for key in ("depth", "mask", "disparity"):
            if e.get(key):
                setattr(rec, key, root / e[key])
        if rec.disparity is not None and "stereo" not in meta:
            raise SceneError(f"{name}: disparity given but manifest has no 'stereo' block")
        for key in ("image", "depth", "mask", "disparity"):
            p = getattr(rec, key)
            if p is not None and not p.is_file():
                raise SceneError(f"{name}: missing {key} file {p}")
        if test_set is not None:
            rec.split = "test" if i in test_set else "train"
        else:
            rec.split = e.get("split", "test" if i % 8 == 0 else "train")
        frames.append(rec)

    ds = SceneDataset(root, frames,
                      aabb=np.asarray(meta["aabb"], dtype=np.float64) if "aabb" in meta else None,
                      background=np.asarray(meta.get("background", (0, 0, 0)), dtype=np.float64),
                      stereo=dict(meta.get("stereo", {})))
    if check_images:
        for i, f in enumerate(frames):
            try:
                img = ds.image(i)
            except ImageFormatError as e:
                raise SceneError(f"frame {i}: {e}") from e
            if img.shape[:2] != (f.camera.height, f.camera.width):
                raise SceneError(f"frame {i}: image {f.image.name} is {img.shape[1]}x{img.shape[0]}, "
                                 f"manifest says {f.camera.width}x{f.camera.height}")
            if f.depth is not None:
                d = ds.depth(i)
                if d.shape != img.shape[:2]:
                    raise SceneError(f"frame {i}: depth {f.depth.name} shape {d.shape} != image {img.shape[:2]}")
            if f.mask is not None and ds.ignore_mask(i).shape != img.shape[:2]:
                raise SceneError(f"frame {i}: mask {f.mask.name} shape mismatch")
        sizes = {ds.image(i).shape for i in range(len(frames))}
        if len(sizes) > 1:
            raise SceneError(f"images differ in size: {sorted(sizes)}")
    if not ds.train_indices:
        warnings.warn("scene has no training frames", stacklevel=2)
    return ds


def write_manifest(root, meta: dict) -> None:
    root = Path(root)
    tmp = root / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(meta, indent=1, sort_keys=False) + "\n")
    os.replace(tmp, root / MANIFEST)


def frame_entry(i, cam: CameraModel, t, *, depth=True, mask=False) -> dict:
    e = {"image": f"images/{i:05d}.png", "time": float(t),
         "rotation": cam.rotation.tolist(), "translation": cam.translation.tolist()}
    if depth:
        e["depth"] = f"depth/{i:05d}.pfm"
    if mask:
        e["mask"] = f"masks/{i:05d}.png"
    return e
