"""Binary checkpoint container shared by every trained component.

Layout (little endian)::

    b"CKPT" | u32 version=1 | u32 count |
    count x { u32 name_len | name (UTF-8) | u32 rank | u32 dims[rank] | f32 data }
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a CKPT file (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported CKPT version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if pos + 4 * n > len(buf):
                raise CheckpointError(f"truncated data for tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * n
    except struct.error as exc:
        raise CheckpointError(f"truncated CKPT file: {exc}") from None
    return out


def save(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
