"""Versioned binary container for model checkpoints.

Layout (all integers little-endian u32)::

    b"EEXP" | version | header_len | header (UTF-8 JSON) |
    tensor_count | { ndim | dims[ndim] | float32 LE payload }*

The header carries the layer table and any model-specific metadata. JSON is
emitted with sorted keys and fixed separators, so decoding and re-encoding a
file reproduces it byte for byte.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

MAGIC = b"EEXP"
VERSION = 1
_U32 = struct.Struct("<I")


def _dump_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def pack_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f4")
    dims = arr.shape
    return (_U32.pack(len(dims)) + b"".join(_U32.pack(d) for d in dims)
            + np.ascontiguousarray(arr).tobytes())


def unpack_tensor(buf: bytes | memoryview, offset: int) -> tuple[np.ndarray, int]:
    (ndim,), offset = _read(buf, offset, _U32)
    if ndim > 8:
        raise CheckpointError(f"implausible tensor rank {ndim}")
    dims = []
    for _ in range(ndim):
        (d,), offset = _read(buf, offset, _U32)
        dims.append(d)
    count = int(np.prod(dims)) if dims else 1
    nbytes = 4 * count
    if offset + nbytes > len(buf):
        raise CheckpointError("truncated tensor payload")
    arr = np.frombuffer(bytes(buf[offset:offset + nbytes]), dtype="<f4").reshape(dims)
    return arr.astype(np.float32), offset + nbytes


def _read(buf, offset, st: struct.Struct):
    if offset + st.size > len(buf):
        raise CheckpointError("truncated checkpoint")
    return st.unpack_from(buf, offset), offset + st.size


def encode(header: dict, tensors: list[np.ndarray]) -> bytes:
    hdr = _dump_header(header)
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(hdr)), hdr, _U32.pack(len(tensors))]
    parts.extend(pack_tensor(t) for t in tensors)
    return b"".join(parts)


def decode(buf: bytes) -> tuple[dict, list[np.ndarray]]:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    (version,), off = _read(buf, 4, _U32)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (reader is {VERSION})")
    (hlen,), off = _read(buf, off, _U32)
    if off + hlen > len(buf):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(bytes(buf[off:off + hlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    off += hlen
    (count,), off = _read(buf, off, _U32)
    tensors = []
    for _ in range(count):
        t, off = unpack_tensor(buf, off)
        tensors.append(t)
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes after last tensor")
    return header, tensors


def save(path, header: dict, tensors: list[np.ndarray]) -> bytes:
    data = encode(header, tensors)
    Path(path).write_bytes(data)
    return data


def load(path) -> tuple[dict, list[np.ndarray]]:
    return decode(Path(path).read_bytes())
