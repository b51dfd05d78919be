# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: batched simulator stepping, rough-terrain hashing and top-k selection.

Arithmetic mirrors ``_kernels_py`` operation for operation (build with
``-ffp-contract=off``) so both backends produce identical bits.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor
from libc.stdint cimport int64_t, uint64_t, uint8_t

cnp.import_array()

cdef double DT = 0.02
cdef double F_MAX = 4.0
cdef double GRAVITY = 9.81
cdef double STAIR_SPACING = 0.3
cdef double ROUGH_CELL = 0.2
cdef double TWO_NEG53 = 1.0 / 9007199254740992.0


cdef inline double _eta(uint64_t seed, int64_t k) nogil:
    cdef uint64_t z = seed + (<uint64_t>k) * <uint64_t>0x9E3779B97F4A7C15ULL
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EBULL
    z = z ^ (z >> 31)
    return (<double>(z >> 11)) * TWO_NEG53 * 2.0 - 1.0


cdef inline double _slope(int terrain, double d, double x, uint64_t seed) nogil:
    if terrain == 1:
        return 0.4 * d
    if terrain == 2:
        return -(0.4 * d)
    if terrain == 4:
        return 0.3 * d * _eta(seed, <int64_t>floor(x / ROUGH_CELL))
    return 0.0


def rough_eta(field_seed, k):
    cdef const uint64_t[::1] s = np.ascontiguousarray(np.broadcast_to(field_seed, np.shape(k)), dtype=np.uint64).ravel()
    cdef const int64_t[::1] kk = np.ascontiguousarray(k, dtype=np.int64).ravel()
    out = np.empty(kk.shape[0], dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i
    for i in range(kk.shape[0]):
        o[i] = _eta(s[i], kk[i])
    return out.reshape(np.shape(k))


def slope_batch(terrain, difficulty, x, field_seed):
    shape = np.broadcast(np.asarray(terrain), np.asarray(difficulty), np.asarray(x)).shape
    cdef const cnp.int8_t[::1] t = np.ascontiguousarray(np.broadcast_to(terrain, shape), dtype=np.int8).ravel()
    cdef const double[::1] d = np.ascontiguousarray(np.broadcast_to(difficulty, shape), dtype=np.float64).ravel()
    cdef const double[::1] xx = np.ascontiguousarray(np.broadcast_to(x, shape), dtype=np.float64).ravel()
    cdef const uint64_t[::1] s = np.ascontiguousarray(np.broadcast_to(field_seed, shape), dtype=np.uint64).ravel()
    out = np.empty(t.shape[0], dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i
    for i in range(t.shape[0]):
        o[i] = _slope(t[i], d[i], xx[i], s[i])
    return out.reshape(shape)


def physics_step(double[::1] x, double[::1] v, u, terrain, difficulty, mass, friction, motor, restitution, field_seed):
    cdef Py_ssize_t n = x.shape[0]
    cdef const double[::1] uu = np.ascontiguousarray(u, dtype=np.float64)
    cdef const cnp.int8_t[::1] t = np.ascontiguousarray(terrain, dtype=np.int8)
    cdef const double[::1] d = np.ascontiguousarray(difficulty, dtype=np.float64)
    cdef const double[::1] m = np.ascontiguousarray(mass, dtype=np.float64)
    cdef const double[::1] mu = np.ascontiguousarray(friction, dtype=np.float64)
    cdef const double[::1] km = np.ascontiguousarray(motor, dtype=np.float64)
    cdef const double[::1] er = np.ascontiguousarray(restitution, dtype=np.float64)
    cdef const uint64_t[::1] s = np.ascontiguousarray(field_seed, dtype=np.uint64)
    acc = np.empty(n, dtype=np.float64)
    contact = np.zeros(n, dtype=np.uint8)
    slope = np.empty(n, dtype=np.float64)
    cdef double[::1] a_o = acc
    cdef uint8_t[::1] c_o = contact
    cdef double[::1] s_o = slope
    cdef Py_ssize_t i
    cdef double sl, a, vn, xn
    with nogil:
        for i in range(n):
            sl = _slope(t[i], d[i], x[i], s[i])
            a = (F_MAX * km[i] * uu[i] - mu[i] * v[i] - m[i] * GRAVITY * sl) / m[i]
            vn = v[i] + DT * a
            xn = x[i] + DT * vn
            if t[i] == 3 and floor(xn / STAIR_SPACING) > floor(x[i] / STAIR_SPACING):
                vn = vn * (1.0 - 0.5 * d[i] * (1.0 - er[i]))
                c_o[i] = 1
            x[i] = xn
            v[i] = vn
            a_o[i] = a
            s_o[i] = sl
    return acc, contact, slope


def topk_rows(sims, Py_ssize_t n):
    cdef const double[:, ::1] S = np.ascontiguousarray(np.atleast_2d(sims), dtype=np.float64)
    cdef Py_ssize_t q = S.shape[0], m = S.shape[1]
    out = np.empty((q, n), dtype=np.int64)
    cdef int64_t[:, ::1] O = out
    cdef double[::1] best = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t r, j, pos, filled
    cdef double val
    with nogil:
        for r in range(q):
            filled = 0
            for j in range(m):
                val = S[r, j]
                # scan in index order: a later entry only displaces a strictly smaller one
                if filled == n and val <= best[n - 1]:
                    continue
                pos = filled if filled < n else n - 1
                while pos > 0 and best[pos - 1] < val:
                    if pos < n:
                        best[pos] = best[pos - 1]
                        O[r, pos] = O[r, pos - 1]
                    pos -= 1
                best[pos] = val
                O[r, pos] = j
                if filled < n:
                    filled += 1
    return out
