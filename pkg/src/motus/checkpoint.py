"""Versioned binary weight checkpoints.

Layout (little-endian)::

    b"MCKP" | u16 version | u32 len + UTF-8 JSON header | u32 tensor count
    per tensor: u32 len + UTF-8 name | u32 ndim | u32 dims... | f32 data

The JSON header carries the ModelConfig plus free-form metadata. Tensor
names are the torch state-dict keys, so student, teacher and classifier
checkpoints share one namespace (``backbone.*``, ``head.*``).
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

from motus.model import ModelConfig

MAGIC = b"MCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dump_checkpoint(state: dict[str, torch.Tensor], cfg: ModelConfig, meta: dict | None = None) -> bytes:
    f = io.BytesIO()
    f.write(MAGIC)
    f.write(struct.pack("<H", VERSION))
    header = json.dumps({"config": cfg.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    f.write(struct.pack("<I", len(header)))
    f.write(header)
    names = sorted(state)
    f.write(struct.pack("<I", len(names)))
    for name in names:
        arr = state[name].detach().cpu().to(torch.float32).contiguous().numpy()
        b = name.encode()
        f.write(struct.pack("<I", len(b)))
        f.write(b)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype("<f4").tobytes())
    return f.getvalue()


def _take(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError("checkpoint truncated")
    return b


def load_checkpoint(data: bytes) -> tuple[dict[str, torch.Tensor], ModelConfig, dict]:
    f = io.BytesIO(data)
    if _take(f, 4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = struct.unpack("<H", _take(f, 2))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", _take(f, 4))
    header = json.loads(_take(f, hlen))
    (count,) = struct.unpack("<I", _take(f, 4))
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _take(f, 4))
        name = _take(f, nlen).decode()
        (ndim,) = struct.unpack("<I", _take(f, 4))
        shape = struct.unpack(f"<{ndim}I", _take(f, 4 * ndim)) if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(_take(f, 4 * n), "<f4").reshape(shape).copy()
        state[name] = torch.from_numpy(arr)
    return state, ModelConfig(**header["config"]), header["meta"]


def save(path, state, cfg: ModelConfig, meta=None) -> None:
    Path(path).write_bytes(dump_checkpoint(state, cfg, meta))


def load(path):
    return load_checkpoint(Path(path).read_bytes())
