"""Flat binary checkpoints: named float64 arrays, little-endian, magic ASRF0001."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ASRF0001"


def write_checkpoint(path, arrays: dict):
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name, arr in arrays.items():
            # ascontiguousarray would promote 0-d to (1,); keep scalars 0-d
            arr = np.asarray(arr, dtype="<f8")
            if arr.ndim:
                arr = np.ascontiguousarray(arr)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def read_checkpoint(path) -> dict:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) < 4:
                raise ValueError(f"{path}: truncated entry header")
            (nlen,) = struct.unpack("<I", head)
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * count)
            if len(buf) < 8 * count:
                raise ValueError(f"{path}: truncated payload for '{name}'")
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return arrays
