"""Binary checkpoint format.

Layout (little-endian, no padding)::

    b"NRMLAB01"
    repeated until EOF:
        u32 name_length, name bytes (UTF-8)
        u32 rank, rank x u32 dims
        prod(dims) x f32 payload

Training runs in float64; checkpoints store float32.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .exceptions import FormatError

MAGIC = b"NRMLAB01"


def encode(state) -> bytes:
    chunks = [MAGIC]
    for name, arr in state.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if blob[:8] != MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    state: "OrderedDict[str, np.ndarray]" = OrderedDict()
    pos = 8
    end = len(blob)

    def take(n):
        nonlocal pos
        if pos + n > end:
            raise FormatError(f"truncated checkpoint: need {n} bytes", offset=pos)
        out = blob[pos:pos + n]
        pos += n
        return out

    while pos < end:
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        payload = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims)
        if name in state:
            raise FormatError(f"duplicate tensor name {name!r}", offset=pos)
        state[name] = payload.astype(np.float64)
    return state


def save(path, state) -> None:
    Path(path).write_bytes(encode(state))


def load(path) -> "OrderedDict[str, np.ndarray]":
    return decode(Path(path).read_bytes())
