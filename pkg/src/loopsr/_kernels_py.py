"""Pure NumPy versions of the hot loops in ``_kernels.pyx``.

Both backends use only +, -, *, / and floor on float64 plus wrapping uint64
integer arithmetic, so they agree bit for bit.
"""

from __future__ import annotations

import numpy as np

DT = 0.02
F_MAX = 4.0
GRAVITY = 9.81
STAIR_SPACING = 0.3
ROUGH_CELL = 0.2

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TWO_NEG53 = 1.0 / 9007199254740992.0


def rough_eta(field_seed, k):
    """Deterministic hash of ``(field_seed, k)`` mapped into ``[-1, 1)``."""
    seed = np.asarray(field_seed, dtype=np.uint64)
    kk = np.asarray(k, dtype=np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        z = seed + kk * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * _TWO_NEG53 * 2.0 - 1.0


def slope_batch(terrain, difficulty, x, field_seed):
    terrain = np.asarray(terrain)
    d = np.asarray(difficulty, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros(np.broadcast(terrain, d, x).shape)
    out = np.where(terrain == 1, 0.4 * d, out)
    out = np.where(terrain == 2, -(0.4 * d), out)
    rough = terrain == 4
    if np.any(rough):
        cell = np.floor(x / ROUGH_CELL).astype(np.int64)
        eta = rough_eta(np.broadcast_to(field_seed, cell.shape), cell)
        out = np.where(rough, 0.3 * d * eta, out)
    return out


def physics_step(x, v, u, terrain, difficulty, mass, friction, motor, restitution, field_seed):
    """Advance every env by one semi-implicit Euler step, in place on ``x`` and ``v``.

    Returns ``(accel, contact, slope)`` where ``slope`` is the grade used for the step.
    """
    slope = slope_batch(terrain, difficulty, x, field_seed)
    a = (F_MAX * motor * u - friction * v - mass * GRAVITY * slope) / mass
    v_new = v + DT * a
    x_new = x + DT * v_new
    crossed = (terrain == 3) & (np.floor(x_new / STAIR_SPACING) > np.floor(x / STAIR_SPACING))
    factor = 1.0 - 0.5 * difficulty * (1.0 - restitution)
    v_new = np.where(crossed, v_new * factor, v_new)
    x[...] = x_new
    v[...] = v_new
    return a, crossed.astype(np.uint8), slope


def topk_rows(sims, n: int):
    """Indices of the ``n`` largest entries per row, ties to the lowest index."""
    sims = np.atleast_2d(sims)
    order = np.argsort(-sims, axis=1, kind="stable")
    return order[:, :n].astype(np.int64)
