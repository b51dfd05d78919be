"""Little-endian binary helpers shared by the weight, trajectory and store formats."""

from __future__ import annotations

import struct

import numpy as np

from loopsr.errors import FormatError, TruncationError, VersionError


class Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncationError(f"need {n} bytes at offset {self.pos}, only {len(self.buf) - self.pos} left")
        out = bytes(self.buf[self.pos : self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def expect_end(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes")


def read_header(r: Reader, magic: bytes, version: int) -> None:
    got = r.take(len(magic)) if len(r.buf) >= len(magic) else None
    if got is None:
        raise TruncationError("file shorter than its magic bytes")
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    v = r.unpack("I")
    if v != version:
        raise VersionError(f"unsupported format version {v} (expected {version})")


def f64_bytes(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()
