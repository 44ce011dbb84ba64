"""NEMC checkpoint files.

Layout (little-endian)::

    magic   b"NEMC"
    version u32 = 1
    u32 length + UTF-8 JSON  ({"model": ModelConfig fields, ...extra metadata})
    u32 tensor count, then per tensor:
        u32 name length, name bytes, u32 rank, rank x u32 extents,
        prod(extents) float64 values (row-major)

Values are stored as float64 whatever the model precision, so float32
models roundtrip losslessly too.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .network import ModelConfig, ModelParams, init_params

MAGIC = b"NEMC"
VERSION = 1
_U32 = struct.Struct("<I")


def checkpoint_bytes(params: ModelParams, meta: dict | None = None,
                     extra: dict[str, np.ndarray] | None = None) -> bytes:
    blob = dict(meta or {})
    blob["model"] = params.config.to_dict()
    text = json.dumps(blob, sort_keys=True, separators=(",", ":")).encode("utf-8")
    arrays = list(params.arrays().items()) + list((extra or {}).items())
    out = [MAGIC, _U32.pack(VERSION), _U32.pack(len(text)), text, _U32.pack(len(arrays))]
    for name, arr in arrays:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        out += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        out += [_U32.pack(n) for n in arr.shape]
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint truncated while reading {what}", offset=self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def parse_checkpoint(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    n = r.u32("metadata length")
    try:
        meta = json.loads(r.take(n, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"metadata is not valid JSON: {exc}", offset=12) from None
    arrays = {}
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        shape = tuple(r.u32(f"extent of {name}") for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(8 * count, f"values of {name}"), dtype="<f8")
        arrays[name] = data.reshape(shape).astype(np.float64)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes in checkpoint", offset=r.pos)
    return meta, arrays


def save_checkpoint(path, params: ModelParams, meta: dict | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, meta, extra))


def load_checkpoint(path) -> tuple[ModelParams, dict, dict[str, np.ndarray]]:
    """Returns (params, metadata, extra arrays not belonging to the model)."""
    meta, arrays = parse_checkpoint(Path(path).read_bytes())
    if "model" not in meta:
        raise FormatError("checkpoint metadata has no model config")
    cfg = ModelConfig(**meta["model"])
    layout = init_params(cfg)
    missing = [k for k in layout.tensors if k not in arrays]
    if missing:
        raise FormatError(f"checkpoint lacks tensor {missing[0]}")
    params = layout.with_arrays({k: arrays[k] for k in layout.tensors})
    extra = {k: v for k, v in arrays.items() if k not in layout.tensors}
    return params, meta, extra
