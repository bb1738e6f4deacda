"""Binary parameter checkpoints.

Layout (little-endian)::

    b"PDFE"  u16 version  u32 json_len  json_len bytes of UTF-8 JSON
    every tensor of ``param_shapes(config)`` as f32, in declaration order
    u32 CRC32 of all preceding bytes

The JSON block holds ``{"model": ModelConfig, "objective": ObjectiveSpec or
null, "meta": {...}}``. Parameters come back as float64.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .encoder import ModelConfig, ModelParams, check_params, param_shapes
from .errors import CorruptFile
from .objectives import ObjectiveSpec

MAGIC = b"PDFE"
VERSION = 1
_HEAD = struct.Struct("<4sHI")


def dumps(params: ModelParams, config: ModelConfig, objective: ObjectiveSpec | None = None,
          meta: dict | None = None) -> bytes:
    check_params(params, config)
    block = json.dumps({"model": config.to_dict(),
                        "objective": objective.to_dict() if objective else None,
                        "meta": meta or {}}, sort_keys=True).encode()
    parts = [_HEAD.pack(MAGIC, VERSION, len(block)), block]
    parts += [np.ascontiguousarray(params[k], dtype="<f4").tobytes() for k in param_shapes(config)]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(data: bytes, source="checkpoint"):
    """``(params, config, objective, meta)`` from checkpoint bytes."""
    if len(data) < _HEAD.size + 4:
        raise CorruptFile(f"{source}: too short for a checkpoint")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptFile(f"{source}: CRC mismatch")
    magic, version, n = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise CorruptFile(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise CorruptFile(f"{source}: unsupported version {version}")
    try:
        header = json.loads(data[_HEAD.size:_HEAD.size + n])
        config = ModelConfig.from_dict(header["model"])
        obj = header.get("objective")
        objective = ObjectiveSpec.from_dict(obj) if obj else None
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptFile(f"{source}: bad config block ({exc})") from None
    shapes = param_shapes(config)
    total = sum(int(np.prod(s)) for s in shapes.values())
    off = _HEAD.size + n
    if len(data) - 4 - off != 4 * total:
        raise CorruptFile(f"{source}: expected {total} floats after the config block")
    flat = np.frombuffer(data, dtype="<f4", count=total, offset=off).astype(np.float64)
    params, pos = ModelParams(), 0
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        params[name] = flat[pos:pos + size].reshape(shape).copy()
        pos += size
    return params, config, objective, header.get("meta", {})


def save(path, params, config, objective=None, meta=None) -> None:
    Path(path).write_bytes(dumps(params, config, objective, meta))


def load(path):
    return loads(Path(path).read_bytes(), source=str(path))
