"""Flat named-array archive.

Layout (all integers little-endian)::

    magic     8 bytes  b"HQVAECKP"
    version   u32
    count     u32
    entries   count times:
        name_len u16, name utf-8
        dtype_len u8, dtype str (numpy, e.g. "<f4")
        ndim u8, shape ndim * u64
        nbytes u64, payload
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"HQVAECKP"
VERSION = 1


class CheckpointError(IOError):
    pass


def save_arrays(path, arrays):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        _write(tmp, arrays)
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def _write(tmp, arrays):
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            nb = name.encode()
            dt = arr.dtype.str.encode()
            f.write(struct.pack("<H", len(nb)) + nb)
            f.write(struct.pack("<B", len(dt)) + dt)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            payload = np.ascontiguousarray(arr).tobytes()
            f.write(struct.pack("<Q", len(payload)))
            f.write(payload)


def _read(f, n, path):
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError(f"{path}: truncated at byte {f.tell()}")
    return b


def load_arrays(path):
    path = Path(path)
    out = {}
    with open(path, "rb") as f:
        if _read(f, 8, path) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        version, count = struct.unpack("<II", _read(f, 8, path))
        if version != VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
        for _ in range(count):
            (nl,) = struct.unpack("<H", _read(f, 2, path))
            name = _read(f, nl, path).decode()
            (dl,) = struct.unpack("<B", _read(f, 1, path))
            dtype = np.dtype(_read(f, dl, path).decode())
            (ndim,) = struct.unpack("<B", _read(f, 1, path))
            shape = struct.unpack(f"<{ndim}Q", _read(f, 8 * ndim, path))
            (nbytes,) = struct.unpack("<Q", _read(f, 8, path))
            out[name] = np.frombuffer(_read(f, nbytes, path), dtype=dtype).reshape(shape).copy()
    return out


def encode_json(obj):
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode(), dtype=np.uint8)


def decode_json(arr):
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode())
