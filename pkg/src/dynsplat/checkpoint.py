"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic   8 bytes  b"DSPLCKPT"
    version u32
    count   u32      number of sections
    section * count:
        name_len u16, name utf-8
        size     u64  payload bytes
        crc32    u32  of the payload
        payload

The ``meta`` section holds JSON. Every other section is one float64 array:
``ndim u8``, ``ndim * u64`` dims, then little-endian doubles. Array sections
are named ``cloud.*``, ``field.*``, ``dec.*`` and ``opt.{m,v}.<param>``.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .antialias import FilterConfig
from .cloud import GaussianCloud
from .hexplane import HexPlaneField
from .pipeline import Model

MAGIC = b"DSPLCKPT"
VERSION = 1
CLOUD_FIELDS = ("positions", "log_scales", "rotations", "sh_coeffs", "opacity_logits", "max_rate")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: Model
    iteration: int = 0
    config: dict = field(default_factory=dict)
    config_hash: str = ""
    opt_state: dict = field(default_factory=dict)  # {"step": int, "m": {...}, "v": {...}}
    extra: dict = field(default_factory=dict)


def config_hash(model_config: dict) -> str:
    blob = json.dumps(model_config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _pack_array(a) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f8")
    return struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape) + a.tobytes()


def _unpack_array(name, buf: bytes):
    try:
        nd = buf[0]
        shape = struct.unpack_from(f"<{nd}Q", buf, 1)
    except (IndexError, struct.error) as e:
        raise CheckpointError(f"section '{name}': malformed array header") from e
    off = 1 + 8 * nd
    n = int(np.prod(shape)) if nd else 1
    if len(buf) != off + 8 * n:
        raise CheckpointError(f"section '{name}': expected {off + 8 * n} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype="<f8", offset=off, count=n).astype(np.float64).reshape(shape)


def _sections(ck: Checkpoint):
    m = ck.model
    f = m.field
    meta = {
        "iteration": int(ck.iteration),
        "config": ck.config,
        "config_hash": ck.config_hash,
        "decoder_kind": m.decoder_kind,
        "motion": m.motion,
        "filters": m.filters.to_dict(),
        "background": [float(x) for x in m.background],
        "chunk": int(m.chunk),
        "sh_head": bool(m.sh_head),
        "support_alpha": float(m.support_alpha),
        "field": None if f is None else {
            "aabb_min": f.aabb_min.tolist(), "aabb_max": f.aabb_max.tolist(),
            "t0": f.t0, "t1": f.t1, "levels": f.levels, "planes": sorted(f.grids)},
        "decoder": sorted(m.decoder),
        "opt_step": int(ck.opt_state.get("step", 0)),
        "opt_params": sorted(ck.opt_state.get("m", {})),
        "extra": ck.extra,
    }
    yield "meta", json.dumps(meta, sort_keys=True).encode()
    for k in CLOUD_FIELDS:
        yield f"cloud.{k}", _pack_array(getattr(m.cloud, k))
    if f is not None:
        for k in sorted(f.grids):
            yield k, _pack_array(f.grids[k])
    for k in sorted(m.decoder):
        yield k, _pack_array(m.decoder[k])
    for which in ("m", "v"):
        for k in sorted(ck.opt_state.get(which, {})):
            yield f"opt.{which}.{k}", _pack_array(ck.opt_state[which][k])


def save_checkpoint(ck: Checkpoint, path) -> None:
    """Write atomically (temp file then rename)."""
    secs = list(_sections(ck))
    parts = [MAGIC, struct.pack("<II", VERSION, len(secs))]
    for name, payload in secs:
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<QI", len(payload), zlib.crc32(payload)))
        parts.append(payload)
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def _read_sections(raw: bytes):
    if raw[:8] != MAGIC:
        raise CheckpointError("section 'header': bad magic, not a checkpoint file")
    if len(raw) < 16:
        raise CheckpointError("section 'header': truncated")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"section 'header': unsupported version {version} (expected {VERSION})")
    off = 16
    out = {}
    for k in range(count):
        label = f"#{k}"
        try:
            (nl,) = struct.unpack_from("<H", raw, off)
            if off + 2 + nl > len(raw):
                raise struct.error("name past end")
            name = raw[off + 2:off + 2 + nl].decode()
            label = name
            off += 2 + nl
            size, crc = struct.unpack_from("<QI", raw, off)
        except (struct.error, UnicodeDecodeError) as e:
            raise CheckpointError(f"section '{label}': truncated header") from e
        off += 12
        payload = raw[off:off + size]
        if len(payload) != size:
            raise CheckpointError(f"section '{name}': truncated ({len(payload)} of {size} bytes)")
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"section '{name}': checksum mismatch (corrupt)")
        out[name] = payload
        off += size
    if off != len(raw):
        raise CheckpointError(f"section 'trailer': {len(raw) - off} unexpected bytes after last section")
    return out


def load_checkpoint(path, *, expect_hash: Optional[str] = None,
                    expect_kind: Optional[str] = None, allow_incompatible: bool = False) -> Checkpoint:
    """Read a checkpoint; optionally refuse one built with a different model config."""
    with open(path, "rb") as fh:
        raw = fh.read()
    secs = _read_sections(raw)
    if "meta" not in secs:
        raise CheckpointError("section 'meta': missing")
    try:
        meta = json.loads(secs["meta"].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError("section 'meta': invalid JSON") from e

    def arr(name):
        if name not in secs:
            raise CheckpointError(f"section '{name}': missing")
        return _unpack_array(name, secs[name])

    if not allow_incompatible:
        if expect_kind is not None and meta["decoder_kind"] != expect_kind:
            raise CheckpointError(
                f"section 'meta': checkpoint decoder is {meta['decoder_kind']!r}, expected {expect_kind!r} "
                "(pass allow_incompatible to override)")
        if expect_hash is not None and meta["config_hash"] != expect_hash:
            raise CheckpointError(
                f"section 'meta': config hash {meta['config_hash']} differs from expected {expect_hash} "
                "(pass allow_incompatible to override)")

    cloud = GaussianCloud(**{k: arr(f"cloud.{k}") for k in CLOUD_FIELDS})
    fm = meta["field"]
    fld = None
    if fm is not None:
        fld = HexPlaneField({k: arr(k) for k in fm["planes"]}, fm["aabb_min"], fm["aabb_max"],
                            fm["t0"], fm["t1"], levels=fm["levels"])
    decoder = {k: arr(k) for k in meta["decoder"]}
    model = Model(cloud, fld, decoder, meta["decoder_kind"], motion=meta["motion"],
                  filters=FilterConfig(**meta["filters"]), background=np.array(meta["background"]),
                  chunk=meta["chunk"], sh_head=meta["sh_head"],
                  support_alpha=meta.get("support_alpha", 1e-9))
    opt = {}
    if meta["opt_params"]:
        opt = {"step": meta["opt_step"],
               "m": {k: arr(f"opt.m.{k}") for k in meta["opt_params"]},
               "v": {k: arr(f"opt.v.{k}") for k in meta["opt_params"]}}
    return Checkpoint(model, meta["iteration"], meta["config"], meta["config_hash"], opt, meta.get("extra", {}))
