"""Packed binary parameter checkpoints.

Layout, all little-endian:

    magic   4 bytes  b"PTCK"
    version u32      format version (currently 1)
    meta    u32 + utf-8 JSON (free-form run metadata, e.g. config hash)
    count   u32      number of arrays
    table   per array: u16 name-len + utf-8 name, u8 dtype code
            (4 = float32, 8 = float64), u8 ndim, ndim x u32 dims
    payload raw float bytes, in table order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PTCK"
VERSION = 1

_DTYPE_CODE = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}
_CODE_DTYPE = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class CheckpointError(IOError):
    """Checkpoint file is missing, truncated, or malformed."""


def save(path, arrays: dict, meta: dict | None = None):
    """Write named float arrays plus a metadata dict to ``path``."""
    path = Path(path)
    names = list(arrays.keys())
    blobs = []
    table = bytearray()
    for name in names:
        arr = np.asarray(arrays[name])
        if arr.dtype not in _DTYPE_CODE:
            arr = arr.astype(np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = arr.copy()
        encoded = name.encode("utf-8")
        table += struct.pack("<H", len(encoded)) + encoded
        table += struct.pack("<BB", _DTYPE_CODE[arr.dtype], arr.ndim)
        table += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blobs.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(names)))
        fh.write(bytes(table))
        for blob in blobs:
            fh.write(blob)


def load(path) -> tuple[dict, dict]:
    """Read a checkpoint; returns (name -> array, meta)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    off = 4
    version, = struct.unpack_from("<I", raw, off)
    off += 4
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta_len, = struct.unpack_from("<I", raw, off)
    off += 4
    meta = json.loads(raw[off:off + meta_len].decode("utf-8"))
    off += meta_len
    count, = struct.unpack_from("<I", raw, off)
    off += 4
    entries = []
    for _ in range(count):
        name_len, = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + name_len].decode("utf-8")
        off += name_len
        code, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        if code not in _CODE_DTYPE:
            raise CheckpointError(f"unknown dtype code {code} for '{name}'")
        entries.append((name, _CODE_DTYPE[code], shape))
    arrays = {}
    for name, dtype, shape in entries:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = n * dtype.itemsize
        if off + nbytes > len(raw):
            raise CheckpointError(f"truncated payload for '{name}'")
        arrays[name] = np.frombuffer(raw, dtype=dtype, count=n, offset=off).reshape(shape).copy()
        off += nbytes
    return arrays, meta
