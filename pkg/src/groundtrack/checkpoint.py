"""Binary checkpoint container: a config echo plus named little-endian float32 tensors.

Layout (all integers little-endian)::

    magic  b"GTCKPT\\0\\0"
    u32    format version
    u32    config length, then that many bytes of UTF-8 JSON (sorted keys)
    u32    tensor count
    per tensor:
        u16 name length, name (UTF-8)
        u8  dtype code (0 = float32)
        u8  ndim, then ndim x u32 dims
        raw little-endian data
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from typing import Dict, Tuple

import numpy as np
import torch

MAGIC = b"GTCKPT\0\0"
VERSION = 1
_DTYPES = {0: np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


def dumps(tensors: Dict[str, torch.Tensor], config: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    cfg = json.dumps(config, sort_keys=True).encode()
    buf.write(struct.pack("<II", VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        arr = np.asarray(t.detach().cpu().numpy(), dtype="<f4", order="C")  # keeps 0-d shapes
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", 0, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> Tuple["OrderedDict[str, torch.Tensor]", dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("checkpoint truncated")
        out = blob[pos:pos + n]
        pos += n
        return out

    version, clen = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported")
    config = json.loads(take(clen).decode())
    (count,) = struct.unpack("<I", take(4))
    tensors = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"tensor {name}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[code]
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last tensor")
    return tensors, config


def save_checkpoint(path: str, tensors: Dict[str, torch.Tensor], config: dict) -> None:
    with open(path, "wb") as f:
        f.write(dumps(tensors, config))


def load_checkpoint(path: str):
    try:
        with open(path, "rb") as f:
            return loads(f.read())
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
