"""PNG and PFM reading/writing.

PNGs are 8-bit; values map to [0, 1] by /255. PFM follows the usual
convention: a negative scale marks little-endian data, rows are stored
bottom-to-top. We always write little-endian.
"""
from __future__ import annotations

import os
import re

import numpy as np
from PIL import Image


class ImageFormatError(ValueError):
    pass


def _atomic_write(path, data: bytes):
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def to_uint8(img):
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img):
    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def read_png(path, *, mode="RGB"):
    """Float image in [0, 1]; ``mode="L"`` returns a single-channel (H, W) array."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert(mode), dtype=np.float64)
    except OSError as e:
        raise ImageFormatError(f"{path}: cannot decode PNG ({e})") from e
    return arr / 255.0


def write_pfm(path, data):
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        kind = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        kind = b"PF"
    else:
        raise ImageFormatError(f"PFM needs (H, W) or (H, W, 3) data, got {data.shape}")
    h, w = data.shape[:2]
    body = np.ascontiguousarray(data[::-1]).astype("<f4").tobytes()
    _atomic_write(path, kind + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n" + body)


def read_pfm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s", raw)
    if m is None:
        raise ImageFormatError(f"{path}: not a PFM file")
    kind, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    ch = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    n = w * h * ch
    body = raw[m.end():]
    if len(body) < 4 * n:
        raise ImageFormatError(f"{path}: truncated PFM payload ({len(body)} of {4 * n} bytes)")
    arr = np.frombuffer(body[:4 * n], dtype=dtype).astype(np.float64)
    arr = arr.reshape((h, w, ch) if ch == 3 else (h, w))
    return arr[::-1].copy()
