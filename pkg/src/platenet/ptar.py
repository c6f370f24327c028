"""PTAR: a flat little-endian archive of named float32 tensors.

Layout::

    b"PTAR" | u32 version (=1) | u32 count
    per tensor: u32 name_len | name (utf-8) | u8 dtype (0 = float32)
                | u32 ndim | ndim x u64 dims | raw payload
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ArchiveError

MAGIC = b"PTAR"
VERSION = 1
_DTYPES = {0: np.dtype("<f4")}


def dumps(tensors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> bytes:
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    names = [name for name, _ in items]
    if len(set(names)) != len(names):
        raise ArchiveError("duplicate tensor names")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(items)))
    for name, value in items:
        arr = np.asarray(value, dtype="<f4")  # keeps 0-d tensors 0-d
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BI", 0, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def loads(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ArchiveError("truncated archive")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise ArchiveError("bad magic")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ArchiveError(f"unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ArchiveError("tensor name is not valid utf-8") from exc
        dtype_code, ndim = struct.unpack("<BI", take(5))
        if dtype_code not in _DTYPES:
            raise ArchiveError(f"unknown dtype {dtype_code}")
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dtype = _DTYPES[dtype_code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        payload = take(nbytes)
        if name in out:
            raise ArchiveError(f"duplicate tensor name {name!r}")
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(np.float32)
    if pos != len(view):
        raise ArchiveError("trailing bytes after last tensor")
    return out


def write(path, tensors) -> None:
    Path(path).write_bytes(dumps(tensors))


def read(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
