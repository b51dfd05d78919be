"""``LSRW`` weight files: named float64 tensors."""

from __future__ import annotations

import os
import struct

import numpy as np

from loopsr.binio import Reader, f64_bytes, read_header

MAGIC = b"LSRW"
VERSION = 1


def dumps_weights(arrays: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, a in arrays.items():
        a = np.asarray(a, dtype=np.float64)
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(f64_bytes(a))
    return b"".join(out)


def loads_weights(buf: bytes) -> dict[str, np.ndarray]:
    r = Reader(buf)
    read_header(r, MAGIC, VERSION)
    count = r.unpack("I")
    arrays = {}
    for _ in range(count):
        name = r.take(r.unpack("I")).decode("utf-8")
        rank = r.unpack("I")
        dims = tuple(r.unpack(f"{rank}I")) if rank > 1 else ((r.unpack("I"),) if rank == 1 else ())
        arrays[name] = r.f64(int(np.prod(dims, dtype=np.int64))).reshape(dims)
    r.expect_end()
    return arrays


def save_weights(arrays: dict[str, np.ndarray], path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps_weights(arrays))
    os.replace(tmp, path)


def load_weights(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads_weights(fh.read())
