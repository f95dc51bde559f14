"""Versioned binary model checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic  b"RFPCNET\\0"
    u32       format version
    u32       header length n
    n bytes   UTF-8 JSON header: model config, dtype tag, parameter names/shapes
    ...       parameters in canonical order, little-endian ("<f4"; "<f8" for
              64-bit models so the round trip stays bit-exact)
    u32       CRC-32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from .model import ModelConfig, PredictiveModel

MAGIC = b"RFPCNET\0"
VERSION = 1
_DTYPES = {"<f4": np.float32, "<f8": np.float64}


def save_checkpoint(model: PredictiveModel, path, meta: dict | None = None) -> None:
    tag = "<f8" if model.dtype == np.float64 else "<f4"
    shapes = model.config.param_shapes()
    params = []
    for name, shape in shapes.items():
        p = model.params[name]
        if p.shape != tuple(shape):
            raise CheckpointError(f"parameter {name} has shape {p.shape}, expected {shape}")
        params.append((name, list(shape)))
    header = json.dumps(
        {"config": asdict(model.config), "dtype": tag, "params": params, "meta": meta or {}},
        sort_keys=True,
    ).encode()
    body = bytearray(MAGIC)
    body += struct.pack("<II", VERSION, len(header))
    body += header
    for name in shapes:
        body += np.ascontiguousarray(model.params[name], dtype=np.dtype(tag)).tobytes()
    body += struct.pack("<I", zlib.crc32(body))
    Path(path).write_bytes(bytes(body))


def read_header(path) -> dict:
    return _parse(Path(path).read_bytes())[0]


def load_checkpoint(path) -> PredictiveModel:
    header, blob = _parse(Path(path).read_bytes())
    cfg = header["config"]
    config = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()})
    dtype = np.dtype(header["dtype"])
    expected = config.param_shapes()
    listed = [(n, tuple(s)) for n, s in header["params"]]
    if listed != [(n, tuple(s)) for n, s in expected.items()]:
        raise CheckpointError("parameter table does not match the stored model config")
    params, off = {}, 0
    for name, shape in listed:
        nbytes = int(np.prod(shape)) * dtype.itemsize
        chunk = blob[off : off + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError("checkpoint is truncated")
        params[name] = np.frombuffer(chunk, dtype=dtype).reshape(shape).astype(_DTYPES[header["dtype"]])
        off += nbytes
    if off != len(blob):
        raise CheckpointError("trailing bytes after parameters")
    return PredictiveModel(config, params)


def _parse(data: bytes):
    if len(data) < len(MAGIC) + 12 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<II", data, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError("checkpoint is corrupt (CRC mismatch)")
    start = len(MAGIC) + 8
    try:
        header = json.loads(data[start : start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    if header.get("dtype") not in _DTYPES:
        raise CheckpointError(f"unsupported parameter dtype {header.get('dtype')!r}")
    return header, data[start + hlen : -4]
