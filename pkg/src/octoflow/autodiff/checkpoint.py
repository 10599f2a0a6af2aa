"""``OCKPT1`` checkpoints: named float64 arrays, little-endian."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"OCKPT1"


def dumps(arrays: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC]
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(np.ascontiguousarray(a).tobytes())
    return b"".join(out)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if not buf.startswith(MAGIC):
        raise ValueError("not an OCKPT1 checkpoint")
    pos = len(MAGIC)
    arrays = {}
    while pos < len(buf):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    return arrays


def save(arrays: dict[str, np.ndarray], path: str | Path) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
