"""Binary little-endian PLY storage for :class:`GaussianCloud`.

One ``double`` vertex property per attribute channel::

    x y z  scale_0..2  rot_0..3  f_dc_0..2  f_rest_0..(3*(K-1)-1)  opacity  max_rate

``f_rest`` is channel-major: entry ``c * (K - 1) + (k - 1)`` holds SH
coefficient ``k`` of color channel ``c``. ``max_rate`` is optional on load
(defaults to 1). Scales are stored in log domain and opacity as a logit.
"""
from __future__ import annotations

import os

import numpy as np

from .cloud import GaussianCloud


class PlyError(ValueError):
    def __init__(self, message, offset=None):
        self.offset = offset
        where = f" (byte offset {offset})" if offset is not None else ""
        super().__init__(message + where)


_TYPES = {
    "double": "<f8", "float64": "<f8", "float": "<f4", "float32": "<f4",
}


def _property_names(k: int) -> list[str]:
    names = ["x", "y", "z"] + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)]
    names += [f"f_dc_{i}" for i in range(3)]
    names += [f"f_rest_{i}" for i in range(3 * (k - 1))]
    return names + ["opacity", "max_rate"]


def save_ply(cloud: GaussianCloud, path) -> None:
    n, k = len(cloud), cloud.sh_coeffs.shape[1]
    names = _property_names(k)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property double {nm}" for nm in names]
    header.append("end_header")
    rest = np.transpose(cloud.sh_coeffs[:, 1:, :], (0, 2, 1)).reshape(n, 3 * (k - 1))
    data = np.concatenate([
        cloud.positions, cloud.log_scales, cloud.rotations,
        cloud.sh_coeffs[:, 0, :], rest, cloud.opacity_logits, cloud.max_rate,
    ], axis=1).astype("<f8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())
    os.replace(tmp, path)


def load_ply(path) -> GaussianCloud:
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply\n") or end < 0:
        raise PlyError("missing ply magic or end_header", 0)
    body_start = end + len(b"end_header\n")
    lines = blob[:end].decode("ascii", errors="replace").split("\n")
    offset = 0
    n = None
    props: list[tuple[str, str]] = []
    for line in lines:
        tok = line.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            pass
        elif tok[0] == "format":
            if tok[1:] != ["binary_little_endian", "1.0"]:
                raise PlyError(f"unsupported format {' '.join(tok[1:])!r}", offset)
        elif tok[0] == "element":
            if tok[1] != "vertex" or n is not None:
                raise PlyError(f"unexpected element {tok[1]!r}", offset)
            n = int(tok[2])
        elif tok[0] == "property":
            if len(tok) != 3 or tok[1] not in _TYPES:
                raise PlyError(f"unsupported property declaration {line!r}", offset)
            props.append((tok[2], _TYPES[tok[1]]))
        else:
            raise PlyError(f"unrecognized header line {line!r}", offset)
        offset += len(line) + 1
    if n is None:
        raise PlyError("no vertex element declared", 0)

    declared = [p for p, _ in props]
    n_rest = sum(1 for p in declared if p.startswith("f_rest_"))
    if n_rest % 3:
        raise PlyError(f"f_rest count {n_rest} is not a multiple of 3", 0)
    k = n_rest // 3 + 1
    expected = _property_names(k)
    for p in expected:
        if p not in declared and p != "max_rate":
            raise PlyError(f"missing property {p!r}", 0)
    for p in declared:
        if p not in expected:
            raise PlyError(f"unknown property {p!r}", 0)

    dtype = np.dtype([(p, t) for p, t in props])
    need = n * dtype.itemsize
    have = len(blob) - body_start
    if have < need:
        raise PlyError(f"truncated payload: expected {need} bytes for {n} vertices, found {have}",
                       body_start + have)
    if have > need:
        raise PlyError(f"{have - need} trailing bytes after vertex data", body_start + need)
    rec = np.frombuffer(blob, dtype=dtype, count=n, offset=body_start)

    def cols(names):
        return np.stack([rec[c].astype(np.float64) for c in names], axis=1) if names else np.zeros((n, 0))

    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = cols([f"f_dc_{i}" for i in range(3)])
    if k > 1:
        rest = cols([f"f_rest_{i}" for i in range(3 * (k - 1))]).reshape(n, 3, k - 1)
        sh[:, 1:, :] = np.transpose(rest, (0, 2, 1))
    return GaussianCloud(
        positions=cols(["x", "y", "z"]),
        log_scales=cols([f"scale_{i}" for i in range(3)]),
        rotations=cols([f"rot_{i}" for i in range(4)]),
        sh_coeffs=sh,
        opacity_logits=cols(["opacity"]),
        max_rate=cols(["max_rate"]) if "max_rate" in declared else np.ones((n, 1)),
    )
