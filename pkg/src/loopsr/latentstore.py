"""Reference latent set built from labeled simulation data, kNN retrieval and fusion."""

from __future__ import annotations

import hashlib
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from loopsr import kernels
from loopsr.binio import Reader, read_header
from loopsr.errors import ConfigError
from loopsr.terrasim import N_TERRAINS, PARAM_HI, PARAM_LO, check_simplex, one_hot

log = logging.getLogger(__name__)

STORE_MAGIC = b"LSRS"
STORE_VERSION = 1
LATENT_DIM = 32
DEFAULT_NEIGHBORS = 16
_ENTRY = struct.Struct("<" + "d" * (LATENT_DIM + N_TERRAINS + 4) + "IBd")


@dataclass
class ReferenceStore:
    """Parallel arrays, one row per reference trajectory (row order is stable)."""

    z: np.ndarray  # (n, 32)
    c_e: np.ndarray  # (n, 5)
    c_r: np.ndarray  # (n, 4)
    checkpoint: np.ndarray  # (n,) uint32
    terrain: np.ndarray  # (n,) uint8
    difficulty: np.ndarray  # (n,)

    def __len__(self) -> int:
        return len(self.z)

    def validate(self) -> None:
        n = len(self.z)
        if self.z.shape != (n, LATENT_DIM) or self.c_e.shape != (n, N_TERRAINS) or self.c_r.shape != (n, 4):
            raise ConfigError("inconsistent store array shapes")
        if n and np.max(np.abs(np.linalg.norm(self.z, axis=1) - 1.0)) > 1e-9:
            raise ConfigError("stored latents must be unit norm")
        for row in self.c_e:
            check_simplex(row)

    def digest(self) -> str:
        return hashlib.sha256(dumps_store(self)).hexdigest()


@dataclass
class FusedParams:
    c_e: np.ndarray
    c_r: np.ndarray
    alpha: float


def build_reference(records, codec, smoothing_eps: float | None = None) -> ReferenceStore:
    """Encode every labeled record (inference mode) into a store entry."""
    records = list(records)
    if any(r.label is None for r in records):
        raise ConfigError("reference set needs labeled records")
    eps = codec.cfg.smoothing_eps if smoothing_eps is None else smoothing_eps
    lat = codec.encode_many([r.trajectory for r in records])
    labels = [r.label for r in records]
    ck = [0xFFFFFFFF if lb.checkpoint_id is None else lb.checkpoint_id for lb in labels]
    return ReferenceStore(
        z=np.stack([v.z for v in lat]) if lat else np.zeros((0, LATENT_DIM)),
        c_e=np.stack([one_hot(lb.terrain, eps) for lb in labels]) if labels else np.zeros((0, N_TERRAINS)),
        c_r=np.stack([np.asarray(lb.robot, dtype=np.float64) for lb in labels]) if labels else np.zeros((0, 4)),
        checkpoint=np.array(ck, dtype=np.uint32),
        terrain=np.array([lb.terrain for lb in labels], dtype=np.uint8),
        difficulty=np.array([lb.difficulty for lb in labels], dtype=np.float64),
    )


def neighbors(store: ReferenceStore, queries, n: int) -> np.ndarray:
    """Row indices of the ``n`` most similar entries per query, ties to the lowest index."""
    if len(store) == 0:
        raise ConfigError("reference store is empty")
    if not 1 <= n <= len(store):
        raise ConfigError(f"N={n} must lie in [1, {len(store)}]")
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    return kernels.topk_rows(similarities(store.z, q), n)


def similarities(z: np.ndarray, queries: np.ndarray, chunk_values: int = 1 << 22) -> np.ndarray:
    """Inner products ``queries @ z.T`` computed pair by pair.

    A blocked matrix product may round identical store rows differently; the
    elementwise form gives identical rows identical scores, which keeps the
    lowest-index tie-break exact.
    """
    rows = max(1, chunk_values // max(1, z.size))
    out = np.empty((len(queries), len(z)))
    for s in range(0, len(queries), rows):
        out[s:s + rows] = (queries[s:s + rows, None, :] * z[None, :, :]).sum(axis=-1)
    return out


def knn_retrieve(store: ReferenceStore, z, n: int = DEFAULT_NEIGHBORS) -> tuple[np.ndarray, np.ndarray]:
    """Unweighted mean ``(c_e, c_r)`` of the ``n`` nearest entries by inner product."""
    idx = neighbors(store, z, n)
    c_e = store.c_e[idx].mean(axis=1)
    c_r = store.c_r[idx].mean(axis=1)
    if np.ndim(z) == 1:
        return c_e[0], c_r[0]
    return c_e, c_r


def knn_terrain(store: ReferenceStore, z, n: int = DEFAULT_NEIGHBORS) -> np.ndarray:
    """Predicted terrain id per query: argmax of the retrieved terrain distribution."""
    c_e, _ = knn_retrieve(store, np.atleast_2d(z), n)
    return np.argmax(c_e, axis=1)


def fuse(retr, ml, alpha: float = 0.8) -> FusedParams:
    """``alpha * retrieved + (1 - alpha) * decoded``, for the terrain simplex and robot params."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError("alpha must lie in [0, 1]")
    ce_r, cr_r = (np.asarray(a, dtype=np.float64) for a in retr)
    ce_m, cr_m = (np.asarray(a, dtype=np.float64) for a in ml)
    check_simplex(ce_r, tol=1e-9, name="retrieved terrain distribution")
    check_simplex(ce_m, tol=1e-9, name="decoded terrain distribution")
    c_e = alpha * ce_r + (1.0 - alpha) * ce_m
    drift = abs(c_e.sum() - 1.0)
    if drift > 1e-12:
        c_e = c_e / c_e.sum()
    c_r = alpha * cr_r + (1.0 - alpha) * cr_m
    clamped = np.clip(c_r, PARAM_LO, PARAM_HI)
    if np.any(clamped != c_r):
        log.warning("fused robot parameters clamped to global ranges")
    return FusedParams(c_e, clamped, alpha)


# -- persistence ---------------------------------------------------------------


def dumps_store(store: ReferenceStore) -> bytes:
    parts = [STORE_MAGIC, struct.pack("<II", STORE_VERSION, len(store))]
    for i in range(len(store)):
        parts.append(_ENTRY.pack(*store.z[i], *store.c_e[i], *store.c_r[i], int(store.checkpoint[i]),
                                 int(store.terrain[i]), float(store.difficulty[i])))
    return b"".join(parts)


def loads_store(buf: bytes) -> ReferenceStore:
    r = Reader(buf)
    read_header(r, STORE_MAGIC, STORE_VERSION)
    n = r.unpack("I")
    rows = [_ENTRY.unpack(r.take(_ENTRY.size)) for _ in range(n)]
    r.expect_end()
    L, E = LATENT_DIM, N_TERRAINS
    arr = np.array([row[:L + E + 4] for row in rows], dtype=np.float64).reshape(n, L + E + 4)
    return ReferenceStore(
        z=arr[:, :L].copy(),
        c_e=arr[:, L:L + E].copy(),
        c_r=arr[:, L + E:].copy(),
        checkpoint=np.array([row[-3] for row in rows], dtype=np.uint32),
        terrain=np.array([row[-2] for row in rows], dtype=np.uint8),
        difficulty=np.array([row[-1] for row in rows], dtype=np.float64),
    )


def save_store(store: ReferenceStore, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps_store(store))
    os.replace(tmp, path)


def load_store(path) -> ReferenceStore:
    with open(path, "rb") as fh:
        return loads_store(fh.read())
