"""Binary checkpoint format.

Layout, little-endian throughout::

    b"HSEM"                      magic
    u32 version                  currently 1
    u32 count                    number of entries
    count x entry:
        u32 name_len, name (utf-8)
        u32 ndim, ndim x u32 extents
        prod(extents) x f64      row-major payload
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"HSEM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(buf):
                raise CheckpointError(f"entry {name!r} is truncated")
            out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    return out


def save(path, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    try:
        path.write_bytes(dumps(tensors))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc.strerror}") from exc


def load(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return loads(buf)
