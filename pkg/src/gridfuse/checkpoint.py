"""PRM1 named-tensor checkpoints.

Layout (little-endian)::

    magic   b"PRM1"
    u16     version (1)
    u32     tensor count
    per tensor:
        u16 name length, UTF-8 name
        u8  ndim, u32 x ndim shape
        f32 payload, row-major
"""

from __future__ import annotations

import os
import struct
from typing import BinaryIO, Mapping

import numpy as np

from .errors import FormatError, TruncationError, ValidationError

MAGIC = b"PRM1"
VERSION = 1


def prm1_bytes(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if not raw or len(raw) > 0xFFFF:
            raise ValidationError(f"bad tensor name {name!r}")
        a = np.asarray(arr)
        if a.ndim > 255:
            raise ValidationError(f"tensor {name} has too many axes")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


def write_prm1(tensors: Mapping[str, np.ndarray], destination: str | os.PathLike | BinaryIO) -> int:
    payload = prm1_bytes(tensors)
    if isinstance(destination, (str, os.PathLike)):
        with open(destination, "wb") as fh:
            fh.write(payload)
    else:
        destination.write(payload)
    return len(payload)


def read_prm1(source: str | os.PathLike | BinaryIO | bytes) -> dict[str, np.ndarray]:
    if isinstance(source, (bytes, bytearray)):
        buf = bytes(source)
    elif isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            buf = fh.read()
    else:
        buf = source.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if len(buf) - pos < n:
            raise TruncationError(what, n, len(buf) - pos)
        out = buf[pos : pos + n]
        pos += n
        return out

    if len(buf) >= 4 and buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    take(4, "magic")
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported PRM1 version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2, "name length"))
        name = take(n, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(4 * size, f"payload of {name}"), dtype="<f4").reshape(shape)
        if name in out:
            raise FormatError(f"duplicate tensor {name!r}")
        out[name] = data.astype(np.float32)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes")
    return out
