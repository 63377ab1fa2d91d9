"""Binary tensor container shared by checkpoints and datasets.

Layout (all integers little-endian)::

    b"BEEF" | version u32 | entry count u32 |
    per entry: name length u16, UTF-8 name, dtype code u8, rank u8,
               dims u32 * rank, raw little-endian data

dtype codes: 0 = float32, 1 = float64, 2 = int64.
"""

from __future__ import annotations

import io
import json
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"BEEF"
VERSION = 1

_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_DTYPES = {code: dt for dt, code in _CODES.items()}


class ContainerError(ValueError):
    pass


def _normalise(arr) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        target = np.dtype("<f8") if arr.dtype.itemsize == 8 else np.dtype("<f4")
    elif arr.dtype.kind in "iub":
        target = np.dtype("<i8")
    else:
        raise ContainerError(f"unsupported dtype {arr.dtype}")
    return np.ascontiguousarray(arr, dtype=target)


def dumps(entries: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(entries)))
    for name, value in entries.items():
        arr = _normalise(value)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ContainerError(f"entry name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise ContainerError(f"rank {arr.ndim} too large for {name}")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise ContainerError("bad magic; not a BEEF container")
    version, count = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos : pos + nlen]).decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BB", view, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
            dtype = _DTYPES.get(code)
            if dtype is None:
                raise ContainerError(f"unknown dtype code {code} for {name}")
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(view):
                raise ContainerError(f"truncated data for entry {name}")
            arr = np.frombuffer(view[pos : pos + nbytes], dtype=dtype).reshape(dims).copy()
            pos += nbytes
            out[name] = arr
    except struct.error as exc:
        raise ContainerError(f"truncated container: {exc}") from exc
    if pos != len(view):
        raise ContainerError(f"{len(view) - pos} trailing bytes after last entry")
    return out


def save(path: str | os.PathLike, entries: Mapping[str, np.ndarray]) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(entries))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())


def encode_json(obj) -> np.ndarray:
    """Pack a JSON document as an int64 byte vector (the container has no string type)."""
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def decode_json(arr: np.ndarray):
    return json.loads(np.asarray(arr, dtype=np.uint8).tobytes().decode("utf-8"))
