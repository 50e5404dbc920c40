"""Binary checkpoints: named float64 tensors plus a JSON metadata block.

Layout (little-endian)::

    b"FSCK" | version u8 | meta_len u32 | meta (utf-8 JSON) | n_tensors u32
    per tensor: name_len u16 | name | ndim u8 | dims u32 * ndim | float64 data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import ValidationError

MAGIC = b"FSCK"
VERSION = 1


def save_checkpoint(path, state_dict: dict, meta: dict) -> None:
    chunks = [MAGIC, struct.pack("<B", VERSION)]
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    chunks += [struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(state_dict))]
    for name, tensor in state_dict.items():
        arr = tensor.detach().cpu().numpy().astype("<f8")
        key = name.encode()
        chunks += [struct.pack("<H", len(key)), key, struct.pack("<B", arr.ndim)]
        chunks += [struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"checkpoint {path} does not exist")
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise ValidationError(f"{path} is not a checkpoint file")
    if buf[4] != VERSION:
        raise ValidationError(f"unsupported checkpoint version {buf[4]}")
    try:
        pos = 5
        (meta_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        meta = json.loads(buf[pos : pos + meta_len])
        pos += meta_len
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        state = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + klen].decode()
            pos += klen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            state[name] = torch.tensor(arr, dtype=torch.float64)
    except (struct.error, ValueError) as exc:
        raise ValidationError(f"corrupt checkpoint {path}: {exc}") from exc
    if pos != len(buf):
        raise ValidationError(f"corrupt checkpoint {path}: trailing bytes")
    return state, meta
