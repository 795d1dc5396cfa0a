"""Flat binary weight container.

Layout (all integers little-endian):

    magic   4 bytes  b"PHR1"
    version u32
    count   u32      number of entries
    entry*  u32 name length, UTF-8 name, u8 dtype tag (0=f32, 1=f64),
            u32 rank, u32 dim per axis, raw little-endian row-major data

Round trips are bit-exact; entry order is preserved.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import DataError

MAGIC = b"PHR1"
VERSION = 1

_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.dtype.newbyteorder("<")
        if le not in _DTYPE_TAGS:
            raise DataError(f"unsupported dtype {arr.dtype} for entry {name!r}")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BI", _DTYPE_TAGS[le], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(le, copy=False).tobytes(order="C"))
    path.write_bytes(b"".join(chunks))


def load_arrays(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read weight file {path}: {e}") from e
    view = memoryview(raw)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(view):
            raise DataError(f"truncated weight file {path} at byte {off}")
        part = view[off:off + n]
        off += n
        return part

    if bytes(take(4)) != MAGIC:
        raise DataError(f"{path} is not a PHR1 weight container")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise DataError(f"unsupported container version {version} in {path}")

    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        tag, rank = struct.unpack("<BI", take(5))
        if tag not in _TAG_DTYPES:
            raise DataError(f"unknown dtype tag {tag} for entry {name!r} in {path}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = _TAG_DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(take(nbytes), dtype=dtype).reshape(dims).copy()
        out[name] = data
    if off != len(view):
        raise DataError(f"{len(view) - off} trailing bytes in weight file {path}")
    return out
