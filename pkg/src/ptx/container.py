"""Binary tensor container: b"PTX1", u32 ndim, ndim u32 extents, f32 payload (all little-endian)."""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PTX1"


class ContainerError(ValueError):
    pass


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise ContainerError(f"{source}: not a PTX1 tensor file")
    (ndim,) = struct.unpack_from("<I", buf, 4)
    head = 8 + 4 * ndim
    if len(buf) < head:
        raise ContainerError(f"{source}: truncated header")
    shape = struct.unpack_from(f"<{ndim}I", buf, 8)
    count = int(np.prod(shape)) if ndim else 1
    if len(buf) != head + 4 * count:
        raise ContainerError(
            f"{source}: payload has {len(buf) - head} bytes, expected {4 * count} for shape {shape}"
        )
    return np.frombuffer(buf, dtype="<f4", offset=head).reshape(shape).astype(np.float32)


def write_tensor(path, arr: np.ndarray) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(arr))
    os.replace(tmp, path)


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ContainerError(f"{path}: {exc.strerror}") from exc
    return decode(buf, str(path))
