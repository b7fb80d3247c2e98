"""SGDA checkpoint files.

Layout (little-endian): magic ``SGDA``, version u16, then records until EOF,
each ``name_len u16 | utf-8 name | rank u8 | dims u32 * rank | 32-bit values``.
Values are float32 except records named ``rng.*``, which hold raw u32 words
of a generator state.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SGDA"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _encode(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    raw_name = name.encode("utf-8")
    if name.startswith("rng."):
        payload = arr.astype("<u4")
    else:
        payload = arr.astype("<f4")
    head = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + payload.tobytes()


def write_records(path, records) -> None:
    """Write ``(name, array)`` pairs in order."""
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    seen = set()
    for name, arr in records:
        if name in seen:
            raise CheckpointError(f"duplicate record {name}")
        seen.add(name)
        chunks.append(_encode(name, arr))
    Path(path).write_bytes(b"".join(chunks))


def read_records(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an SGDA checkpoint (magic {raw[:4]!r})")
    if len(raw) < 6:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: version {version}, expected {VERSION}")
    out = {}
    pos = 6
    try:
        while pos < len(raw):
            (n,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(raw):
                raise CheckpointError(f"{path}: record {name} truncated")
            dtype = "<u4" if name.startswith("rng.") else "<f4"
            arr = np.frombuffer(raw, dtype=dtype, count=count, offset=pos).reshape(dims)
            out[name] = arr.astype(np.uint32 if name.startswith("rng.") else np.float32)
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated record ({exc})") from None
    return out
