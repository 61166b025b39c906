"""Framed little-endian binary files: magic, u32 version, body, CRC-32.

The CRC trailer covers every preceding byte (magic and version
included), so any single-byte corruption is caught by exactly one of
the four error classes below.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np


class FormatError(Exception):
    """Base class for malformed artifact files."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class Reader:
    """Bounds-checked cursor over a framed file's body."""

    def __init__(self, buf: bytes, offset: int = 0):
        self.buf = buf
        self.pos = offset

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(
                f"file truncated: wanted {n} bytes at offset {self.pos}, "
                f"have {len(self.buf) - self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def f64_array(self, count: int, shape=None) -> np.ndarray:
        arr = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)
        return arr.reshape(shape) if shape is not None else arr


def pack_u32(x: int) -> bytes:
    return struct.pack("<I", x)


def pack_u64(x: int) -> bytes:
    return struct.pack("<Q", x)


def pack_f64(x: float) -> bytes:
    return struct.pack("<d", x)


def pack_f64_array(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def write_framed(path, magic: bytes, version: int, body: bytes) -> None:
    data = magic + pack_u32(version) + body
    crc = zlib.crc32(data) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(data)
        fh.write(pack_u32(crc))


def read_framed(path, magic: bytes, version: int) -> Reader:
    """Open a framed file, verify magic/version/CRC, return a body cursor.

    CRC verification happens up front; the caller's structural parse can
    still raise TruncatedError if header counts point past the end.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(magic) + 8:
        raise TruncatedError(f"file too short to be framed ({len(raw)} bytes)")
    if raw[:len(magic)] != magic:
        raise BadMagicError(f"bad magic {raw[:len(magic)]!r}, expected {magic!r}")
    got_version = struct.unpack("<I", raw[len(magic):len(magic) + 4])[0]
    if got_version != version:
        raise VersionError(f"format version {got_version}, expected {version}")
    stated = struct.unpack("<I", raw[-4:])[0]
    actual = zlib.crc32(raw[:-4]) & 0xFFFFFFFF
    if stated != actual:
        raise ChecksumError(f"CRC mismatch: stored {stated:#010x}, computed {actual:#010x}")
    return Reader(raw[:-4], offset=len(magic) + 4)
