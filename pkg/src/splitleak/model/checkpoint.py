"""Binary checkpoint format (little-endian throughout).

    magic      4 bytes  b"SPLK"
    version    u16
    config     u16 count, then per field: u8 name length, name, i64 value
    metadata   u32 length, UTF-8 JSON (tokenizer vocabulary, position scheme)
    tensors    u32 count, then per tensor:
                 u16 name length, name, u8 rank, u32 dims[rank],
                 u8 dtype tag (1 = float64, 2 = float32), raw data
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .transformer import ModelConfig, SplitModel, init_model

MAGIC = b"SPLK"
VERSION = 1
_DTYPES = {1: "<f8", 2: "<f4"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: SplitModel, path, compact: bool = False,
                    metadata: Optional[dict] = None) -> None:
    meta = {"position_encoding": "learned-additive"}
    meta.update(metadata or {})
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    cfg = model.config.as_dict()
    buf.write(struct.pack("<H", len(cfg)))
    for name, value in cfg.items():
        raw = name.encode()
        buf.write(struct.pack("<B", len(raw)) + raw + struct.pack("<q", int(value)))
    blob = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(blob)) + blob)
    params = model.parameters()
    buf.write(struct.pack("<I", len(params)))
    tag = 2 if compact else 1
    for name, t in params.items():
        raw = name.encode()
        arr = np.ascontiguousarray(t.data, dtype=_DTYPES[tag])
        buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(struct.pack("<B", tag))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, return_metadata: bool = False):
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a SPLK checkpoint")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (count,) = r.unpack("<H")
    cfg = {}
    for _ in range(count):
        (n,) = r.unpack("<B")
        name = r.take(n).decode()
        (cfg[name],) = r.unpack("<q")
    try:
        config = ModelConfig(**cfg)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt config block: {exc}") from exc
    (n,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(n).decode())
    except ValueError as exc:
        raise CheckpointError("corrupt metadata block") from exc
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        (tag,) = r.unpack("<B")
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {name}")
        dt = np.dtype(_DTYPES[tag])
        size = int(np.prod(dims)) * dt.itemsize
        params[name] = np.frombuffer(r.take(size), dtype=dt).reshape(dims).astype(np.float64)
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after tensor records")
    skeleton = init_model(config)
    expected = {k: v.shape for k, v in skeleton.parameters().items()}
    if set(expected) != set(params) or any(params[k].shape != s for k, s in expected.items()):
        raise CheckpointError("tensor records do not match the configured architecture")
    model = skeleton.with_parameters(params)
    return (model, meta) if return_metadata else model
