"""Binary parameter store.

Layout (little-endian): magic ``HSQ1``; u32 metadata length and UTF-8 JSON
metadata; then one record per parameter until end of file: u32 name length,
name bytes, u32 rank, ``rank`` u32 extents, row-major float32 values.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"HSQ1"


def dumps(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(meta_bytes)), meta_bytes]
    for name, value in arrays.items():
        raw = name.encode("utf-8")
        value = np.ascontiguousarray(value, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        parts.append(value.tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:4] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError("truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len).decode("utf-8"))
    arrays: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    return meta, arrays


def write(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(meta, arrays))


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
