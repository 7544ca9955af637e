"""Little-endian binary primitives shared by the checkpoint/bundle/feature formats.

Every on-disk artifact follows the same skeleton: a 4-byte magic, a u32
format version, format-specific fields, and a trailing u64 FNV-1a checksum
over the payload bytes it protects.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import FormatError

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes, state: int = FNV_OFFSET) -> int:
    """64-bit FNV-1a over ``data``, resumable via ``state``."""
    h = state
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


def write_u32(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<I", value))


def write_u64(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<Q", value))


def write_str(fh: BinaryIO, text: str) -> None:
    raw = text.encode("utf-8")
    write_u32(fh, len(raw))
    fh.write(raw)


def read_exact(fh: BinaryIO, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(raw)}")
    return raw


def read_u32(fh: BinaryIO) -> int:
    return struct.unpack("<I", read_exact(fh, 4))[0]


def read_u64(fh: BinaryIO) -> int:
    return struct.unpack("<Q", read_exact(fh, 8))[0]


def read_str(fh: BinaryIO) -> str:
    return read_exact(fh, read_u32(fh)).decode("utf-8")


def f32_payload(arr: np.ndarray) -> bytes:
    """Row-major little-endian f32 bytes of ``arr``."""
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def expect_magic(fh: BinaryIO, magic: bytes, kind: str) -> None:
    got = read_exact(fh, 4)
    if got != magic:
        raise FormatError(f"not a {kind} file: bad magic {got!r}")
