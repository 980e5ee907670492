# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel implementations.

Mirrors _numpy.py operation for operation; the two backends must produce
bit-identical outputs (enforced by tests/test_backends.py).  Keep any change
here in lockstep with the fallback.
"""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport frexp, ldexp, sqrt
from libc.stdint cimport int32_t, int64_t, uint8_t, uint64_t

cnp.import_array()

NAME = "native"

ctypedef fused real:
    float
    double

cdef double[8] GRID_C
GRID_C = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0]
cdef double[15] SGRID_C
SGRID_C = [-6.0, -4.0, -3.0, -2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0]
cdef uint8_t[15] SGRID_CODE_C
SGRID_CODE_C = [15, 14, 13, 12, 11, 10, 9, 0, 1, 2, 3, 4, 5, 6, 7]

cdef uint64_t DOMAIN_SR = 0x5352
cdef double U53 = 1.0 / 9007199254740992.0


cdef inline uint64_t mix64(uint64_t z) nogil:
    z = (z ^ (z >> 30)) * (<uint64_t>0xBF58476D1CE4E5B9)
    z = (z ^ (z >> 27)) * (<uint64_t>0x94D049BB133111EB)
    return z ^ (z >> 31)


cdef inline double uniform_at(uint64_t base, uint64_t index) nogil:
    cdef uint64_t h = mix64(base + (index + 1) * (<uint64_t>0x9E3779B97F4A7C15))
    return <double>(h >> 11) * U53


cdef inline int grid_index(double a) nogil:
    # Midpoint ladder; ties go to the even-mantissa neighbor (see _numpy.py).
    cdef int idx = 0
    if a > 0.25:
        idx += 1
    if a >= 0.75:
        idx += 1
    if a > 1.25:
        idx += 1
    if a >= 1.75:
        idx += 1
    if a > 2.5:
        idx += 1
    if a >= 3.5:
        idx += 1
    if a > 5.0:
        idx += 1
    return idx


cdef inline int ceil_scale_exponent(double amax) nogil:
    cdef int e2
    cdef double m
    cdef int e
    if amax <= 0.0:
        return 0
    m = frexp(amax / 6.0, &e2)
    e = 127 + e2 - (1 if m == 0.5 else 0)
    if e < 0:
        e = 0
    if e > 254:
        e = 254
    return e


cdef inline int floor_exponent_clamped(double t) nogil:
    cdef int e2
    frexp(t, &e2)
    cdef int e = 127 + e2 - 1
    if e < 0:
        e = 0
    if e > 254:
        e = 254
    return e


cdef inline double group_absmax(const double[:, ::1] x, Py_ssize_t row,
                                Py_ssize_t lo, Py_ssize_t hi) nogil:
    cdef double amax = 0.0
    cdef double a
    cdef Py_ssize_t j
    for j in range(lo, hi):
        a = x[row, j] if x[row, j] >= 0.0 else -x[row, j]
        if a > amax:
            amax = a
    return amax


def quantize_rtn(const double[:, ::1] x, int group_size):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    cdef Py_ssize_t ngroups = (cols + group_size - 1) // group_size
    codes_arr = np.empty((rows, cols), dtype=np.uint8)
    scales_arr = np.empty((rows, ngroups), dtype=np.uint8)
    cdef uint8_t[:, ::1] codes = codes_arr
    cdef uint8_t[:, ::1] scales = scales_arr
    cdef Py_ssize_t i, gidx, j, lo, hi
    cdef int e, idx
    cdef double s, v
    with nogil:
        for i in range(rows):
            for gidx in range(ngroups):
                lo = gidx * group_size
                hi = lo + group_size
                if hi > cols:
                    hi = cols
                e = ceil_scale_exponent(group_absmax(x, i, lo, hi))
                scales[i, gidx] = <uint8_t>e
                s = ldexp(1.0, e - 127)
                for j in range(lo, hi):
                    v = x[i, j] / s
                    idx = grid_index(v if v >= 0.0 else -v)
                    if idx == 0:
                        codes[i, j] = 0
                    else:
                        codes[i, j] = <uint8_t>(idx | (8 if v < 0.0 else 0))
    return codes_arr, scales_arr


def quantize_sr(const double[:, ::1] x, int group_size, uint64_t seed,
                uint64_t counter_start):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    cdef Py_ssize_t ngroups = (cols + group_size - 1) // group_size
    codes_arr = np.empty((rows, cols), dtype=np.uint8)
    scales_arr = np.empty((rows, ngroups), dtype=np.uint8)
    cdef uint8_t[:, ::1] codes = codes_arr
    cdef uint8_t[:, ::1] scales = scales_arr
    cdef uint64_t base = mix64(seed ^ mix64(DOMAIN_SR))
    cdef Py_ssize_t i, gidx, j, lo, hi
    cdef int e, k
    cdef double s, v, p, u
    with nogil:
        for i in range(rows):
            for gidx in range(ngroups):
                lo = gidx * group_size
                hi = lo + group_size
                if hi > cols:
                    hi = cols
                e = ceil_scale_exponent(group_absmax(x, i, lo, hi))
                scales[i, gidx] = <uint8_t>e
                s = ldexp(1.0, e - 127)
                for j in range(lo, hi):
                    v = x[i, j] / s
                    # leftmost k in [1, 14] with SGRID[k] >= v
                    k = 1
                    while k < 14 and SGRID_C[k] < v:
                        k += 1
                    p = (v - SGRID_C[k - 1]) / (SGRID_C[k] - SGRID_C[k - 1])
                    u = uniform_at(base, counter_start + <uint64_t>(i * cols + j))
                    if u < p:
                        codes[i, j] = SGRID_CODE_C[k]
                    else:
                        codes[i, j] = SGRID_CODE_C[k - 1]
    return codes_arr, scales_arr


cdef inline int quest_best_exponent(const double[:, ::1] x, Py_ssize_t row,
                                    Py_ssize_t lo, Py_ssize_t hi, double amax,
                                    double ratio_lo, double* vbuf) nogil:
    # Squared errors are accumulated in the divided domain and rescaled by
    # s^2 per candidate; with power-of-two scales this is bit-identical to
    # accumulating (x - dq)^2 directly, and the candidate scale halves per
    # step so only one division per element is needed.
    cdef int e_hi = ceil_scale_exponent(amax)
    cdef int e_lo = floor_exponent_clamped((amax * ratio_lo) / 6.0)
    cdef double s_hi = ldexp(1.0, e_hi - 127)
    cdef Py_ssize_t j, n = hi - lo
    cdef int e, idx, best_e
    cdef double v, a, t, acc, err, best_err, s2
    for j in range(n):
        vbuf[j] = x[row, lo + j] / s_hi
    best_e = e_hi
    best_err = -1.0
    for e in range(e_hi, e_lo - 1, -1):
        s2 = ldexp(1.0, 2 * (e - 127))
        acc = 0.0
        for j in range(n):
            v = vbuf[j]
            a = v if v >= 0.0 else -v
            idx = grid_index(a)
            t = a - GRID_C[idx]
            acc += t * t
        err = s2 * acc
        if best_err < 0.0 or err < best_err:
            best_err = err
            best_e = e
        for j in range(n):
            vbuf[j] = vbuf[j] * 2.0
    return best_e


def quantize_quest(const double[:, ::1] x, int group_size, double ratio_lo):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    cdef Py_ssize_t ngroups = (cols + group_size - 1) // group_size
    codes_arr = np.empty((rows, cols), dtype=np.uint8)
    scales_arr = np.empty((rows, ngroups), dtype=np.uint8)
    mask_arr = np.empty((rows, cols), dtype=np.uint8)
    vbuf_arr = np.empty(group_size, dtype=np.float64)
    cdef uint8_t[:, ::1] codes = codes_arr
    cdef uint8_t[:, ::1] scales = scales_arr
    cdef uint8_t[:, ::1] mask = mask_arr
    cdef double[::1] vbuf = vbuf_arr
    cdef Py_ssize_t i, gidx, j, lo, hi
    cdef int best_e, idx
    cdef double amax, s, v
    with nogil:
        for i in range(rows):
            for gidx in range(ngroups):
                lo = gidx * group_size
                hi = lo + group_size
                if hi > cols:
                    hi = cols
                amax = group_absmax(x, i, lo, hi)
                if amax <= 0.0:
                    scales[i, gidx] = 0
                    for j in range(lo, hi):
                        codes[i, j] = 0
                        mask[i, j] = 1
                    continue
                best_e = quest_best_exponent(x, i, lo, hi, amax, ratio_lo, &vbuf[0])
                scales[i, gidx] = <uint8_t>best_e
                s = ldexp(1.0, best_e - 127)
                for j in range(lo, hi):
                    v = x[i, j] / s
                    mask[i, j] = 1 if (v if v >= 0.0 else -v) <= 6.0 else 0
                    idx = grid_index(v if v >= 0.0 else -v)
                    if idx == 0:
                        codes[i, j] = 0
                    else:
                        codes[i, j] = <uint8_t>(idx | (8 if v < 0.0 else 0))
    return codes_arr, scales_arr, mask_arr


def rtn_values(const double[:, ::1] x, int group_size):
    """quantize_rtn followed by exact dequantization, in one pass."""
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    cdef Py_ssize_t ngroups = (cols + group_size - 1) // group_size
    out_arr = np.empty((rows, cols), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, gidx, j, lo, hi
    cdef int e, idx
    cdef double s, v, mag
    with nogil:
        for i in range(rows):
            for gidx in range(ngroups):
                lo = gidx * group_size
                hi = lo + group_size
                if hi > cols:
                    hi = cols
                e = ceil_scale_exponent(group_absmax(x, i, lo, hi))
                s = ldexp(1.0, e - 127)
                for j in range(lo, hi):
                    v = x[i, j] / s
                    idx = grid_index(v if v >= 0.0 else -v)
                    mag = GRID_C[idx] * s
                    out[i, j] = -mag if v < 0.0 else mag
    return out_arr


def sr_values(const double[:, ::1] x, int group_size, uint64_t seed,
              uint64_t counter_start):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    cdef Py_ssize_t ngroups = (cols + group_size - 1) // group_size
    out_arr = np.empty((rows, cols), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef uint64_t base = mix64(seed ^ mix64(DOMAIN_SR))
    cdef Py_ssize_t i, gidx, j, lo, hi
    cdef int e, k
    cdef double s, v, p, u
    with nogil:
        for i in range(rows):
            for gidx in range(ngroups):
                lo = gidx * group_size
                hi = lo + group_size
                if hi > cols:
                    hi = cols
                e = ceil_scale_exponent(group_absmax(x, i, lo, hi))
                s = ldexp(1.0, e - 127)
                for j in range(lo, hi):
                    v = x[i, j] / s
                    k = 1
                    while k < 14 and SGRID_C[k] < v:
                        k += 1
                    p = (v - SGRID_C[k - 1]) / (SGRID_C[k] - SGRID_C[k - 1])
                    u = uniform_at(base, counter_start + <uint64_t>(i * cols + j))
                    out[i, j] = SGRID_C[k] * s if u < p else SGRID_C[k - 1] * s
    return out_arr


def quest_values(const double[:, ::1] x, int group_size, double ratio_lo):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    cdef Py_ssize_t ngroups = (cols + group_size - 1) // group_size
    out_arr = np.empty((rows, cols), dtype=np.float64)
    mask_arr = np.empty((rows, cols), dtype=np.uint8)
    cdef double[:, ::1] out = out_arr
    cdef uint8_t[:, ::1] mask = mask_arr
    cdef Py_ssize_t i, gidx, j, lo, hi
    cdef int e, e_hi, e_lo, best_e, idx
    cdef double amax, s, v, mag, d, err, best_err
    with nogil:
        for i in range(rows):
            for gidx in range(ngroups):
                lo = gidx * group_size
                hi = lo + group_size
                if hi > cols:
                    hi = cols
                amax = group_absmax(x, i, lo, hi)
                if amax <= 0.0:
                    for j in range(lo, hi):
                        out[i, j] = 0.0
                        mask[i, j] = 1
                    continue
                e_hi = ceil_scale_exponent(amax)
                e_lo = floor_exponent_clamped((amax * ratio_lo) / 6.0)
                best_e = e_hi
                best_err = -1.0
                for e in range(e_hi, e_lo - 1, -1):
                    s = ldexp(1.0, e - 127)
                    err = 0.0
                    for j in range(lo, hi):
                        v = x[i, j] / s
                        idx = grid_index(v if v >= 0.0 else -v)
                        mag = GRID_C[idx] * s
                        d = x[i, j] - (-mag if x[i, j] < 0.0 else mag)
                        err += d * d
                    if best_err < 0.0 or err < best_err:
                        best_err = err
                        best_e = e
                s = ldexp(1.0, best_e - 127)
                for j in range(lo, hi):
                    v = x[i, j] / s
                    mask[i, j] = 1 if (v if v >= 0.0 else -v) <= 6.0 else 0
                    idx = grid_index(v if v >= 0.0 else -v)
                    mag = GRID_C[idx] * s
                    out[i, j] = -mag if v < 0.0 else mag
    return out_arr, mask_arr


def fwht(real[:, ::1] x, int g):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1]
    cdef Py_ssize_t nblk = rows * (n // g)
    out_arr = np.empty((rows, n), dtype=np.float32 if real is float else np.float64)
    if rows == 0 or n == 0:
        return out_arr
    cdef real[:, ::1] out = out_arr
    out[:, :] = x
    cdef real* flat = &out[0, 0]
    cdef real c = <real>(1.0 / sqrt(2.0))
    cdef real a, b
    cdef Py_ssize_t blk, base, h, start, t
    with nogil:
        for blk in range(nblk):
            base = blk * g
            h = 1
            while h < g:
                start = 0
                while start < g:
                    for t in range(base + start, base + start + h):
                        a = flat[t]
                        b = flat[t + h]
                        flat[t] = (a + b) * c
                        flat[t + h] = (a - b) * c
                    start += 2 * h
                h *= 2
    return out_arr


def gemm_nt(real[:, ::1] a, real[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], kdim = a.shape[1], n = b.shape[0]
    bt_arr = np.ascontiguousarray(np.asarray(b).T)
    cdef real[:, ::1] bt = bt_arr
    c_arr = np.zeros((m, n), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] c = c_arr
    cdef Py_ssize_t i, j, kk
    cdef real av
    with nogil:
        for i in range(m):
            for kk in range(kdim):
                av = a[i, kk]
                for j in range(n):
                    c[i, j] = c[i, j] + av * bt[kk, j]
    return c_arr
