"""Pure-numpy kernel implementations.

Fallback for the compiled extension.  Every function here is required to be
bit-identical to its `_native` counterpart: comparison ladders instead of
libm log2, frexp for exponent math, and strictly ascending accumulation
order wherever floating-point rounding depends on it.
"""

from __future__ import annotations

import numpy as np

from .. import rng

NAME = "numpy"

# Non-negative representable magnitudes of the 4-bit element format
# (1 sign, 2 exponent, 1 mantissa), indexed by the low 3 code bits.
GRID = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0])

# Signed grid and the nibble for each entry (zero canonicalized to +0).
SGRID = np.array([-6.0, -4.0, -3.0, -2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0])
SGRID_CODE = np.array([15, 14, 13, 12, 11, 10, 9, 0, 1, 2, 3, 4, 5, 6, 7], dtype=np.uint8)


def _grid_index(a: np.ndarray) -> np.ndarray:
    """Nearest-grid index for magnitudes, half-to-even on the mantissa bit.

    Midpoints sit at {0.25, 0.75, 1.25, 1.75, 2.5, 3.5, 5.0}; ties resolve to
    the neighbor whose mantissa bit is 0 (grid indices 0, 2, 4, 6), so the
    comparison is strict exactly at the tie-down boundaries.
    """
    idx = (a > 0.25).astype(np.uint8)
    idx += a >= 0.75
    idx += a > 1.25
    idx += a >= 1.75
    idx += a > 2.5
    idx += a >= 3.5
    idx += a > 5.0
    return idx


def _group_absmax(x: np.ndarray, g: int) -> np.ndarray:
    rows, cols = x.shape
    ngroups = -(-cols // g)
    a = np.abs(x)
    if ngroups * g != cols:
        a = np.concatenate([a, np.zeros((rows, ngroups * g - cols))], axis=1)
    return a.reshape(rows, ngroups, g).max(axis=2)


def _ceil_scale_exponents(amax: np.ndarray) -> np.ndarray:
    """Biased exponent of the smallest power of two s with amax/s <= 6."""
    m, e2 = np.frexp(amax / 6.0)
    e = np.clip(127 + e2 - (m == 0.5), 0, 254)
    return np.where(amax > 0.0, e, 0).astype(np.uint8)


def _scale_values(exponents: np.ndarray) -> np.ndarray:
    return np.ldexp(1.0, exponents.astype(np.int32) - 127)


def _per_element_scales(exponents: np.ndarray, g: int, cols: int) -> np.ndarray:
    return np.repeat(_scale_values(exponents), g, axis=1)[:, :cols]


def quantize_rtn(x: np.ndarray, group_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Round-to-nearest with per-group absmax power-of-two scales.

    Returns (codes, scales): unpacked nibble codes (rows x cols uint8) and
    biased scale exponents (rows x ngroups uint8).
    """
    scales = _ceil_scale_exponents(_group_absmax(x, group_size))
    v = x / _per_element_scales(scales, group_size, x.shape[1])
    idx = _grid_index(np.abs(v))
    codes = np.where(idx == 0, 0, idx | (np.signbit(v).astype(np.uint8) << 3))
    return codes.astype(np.uint8), scales


def quantize_sr(
    x: np.ndarray, group_size: int, seed: int, counter_start: int
) -> tuple[np.ndarray, np.ndarray]:
    """Stochastic rounding between the two neighboring grid points.

    The uniform draw for element (i, j) comes from stream position
    counter_start + i*cols + j, so results do not depend on how the matrix
    is traversed or partitioned.
    """
    rows, cols = x.shape
    scales = _ceil_scale_exponents(_group_absmax(x, group_size))
    v = x / _per_element_scales(scales, group_size, cols)
    j = np.searchsorted(SGRID, v, side="left").clip(1, 14)
    lo = SGRID[j - 1]
    hi = SGRID[j]
    p_hi = (v - lo) / (hi - lo)
    u = rng.uniform_at(
        seed, rng.DOMAIN_SR, counter_start + np.arange(rows * cols, dtype=np.uint64)
    ).reshape(rows, cols)
    codes = SGRID_CODE[np.where(u < p_hi, j, j - 1)]
    return codes, scales


def quantize_quest(
    x: np.ndarray, group_size: int, ratio_lo: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-group squared-error scale search over candidate power-of-two scales.

    Candidates are every representable exponent between the snapped ends of
    the scale range [absmax*ratio_lo/6, absmax/6]; the no-clip exponent is
    always included, so the chosen error never exceeds plain round-to-nearest.
    Ties keep the larger scale.  Returns (codes, scales, keep_mask) where
    keep_mask marks elements with |x/s| <= 6 before rounding.
    """
    rows, cols = x.shape
    g = group_size
    ngroups = -(-cols // g)
    pad = ngroups * g - cols
    xp = x if pad == 0 else np.concatenate([x, np.zeros((rows, pad))], axis=1)
    xg = xp.reshape(rows, ngroups, g)

    amax = _group_absmax(x, g)
    nonzero = amax > 0.0
    m_hi, e2_hi = np.frexp(amax / 6.0)
    e_hi = np.where(nonzero, np.clip(127 + e2_hi - (m_hi == 0.5), 0, 254), 0).astype(np.int32)
    _, e2_lo = np.frexp((amax * ratio_lo) / 6.0)
    e_lo = np.where(nonzero, np.clip(127 + e2_lo - 1, 0, 254), 0).astype(np.int32)

    # squared errors accumulate in the divided domain and rescale by s^2 per
    # candidate; scales halve per step, so each element divides only once
    vg = np.abs(xg) / np.ldexp(1.0, e_hi - 127)[..., None]
    best_e = e_hi.copy()
    best_err = np.full((rows, ngroups), np.inf)
    width = int((e_hi - e_lo).max(initial=0))
    for k in range(width + 1):
        e_k = e_hi - k
        t = vg - GRID[_grid_index(vg)]
        acc = np.zeros((rows, ngroups))
        for j in range(g):
            acc += t[:, :, j] * t[:, :, j]
        err = np.ldexp(1.0, 2 * (e_k - 127)) * acc
        better = (e_k >= e_lo) & (err < best_err)
        best_err[better] = err[better]
        best_e[better] = e_k[better]
        vg *= 2.0

    scales = best_e.astype(np.uint8)
    v = xp / np.repeat(_scale_values(scales), g, axis=1)
    idx = _grid_index(np.abs(v))
    codes = np.where(idx == 0, 0, idx | (np.signbit(v).astype(np.uint8) << 3))
    mask = (np.abs(v) <= 6.0).astype(np.uint8)
    return codes[:, :cols].astype(np.uint8), scales, mask[:, :cols]


_SDECODE = np.concatenate([GRID, -GRID])


def _values_from(codes: np.ndarray, scales: np.ndarray, g: int, cols: int) -> np.ndarray:
    return _SDECODE[codes] * _per_element_scales(scales, g, cols)


def rtn_values(x: np.ndarray, group_size: int) -> np.ndarray:
    """quantize_rtn followed by exact dequantization, in one call."""
    codes, scales = quantize_rtn(x, group_size)
    return _values_from(codes, scales, group_size, x.shape[1])


def sr_values(x: np.ndarray, group_size: int, seed: int, counter_start: int) -> np.ndarray:
    codes, scales = quantize_sr(x, group_size, seed, counter_start)
    return _values_from(codes, scales, group_size, x.shape[1])


def quest_values(
    x: np.ndarray, group_size: int, ratio_lo: float
) -> tuple[np.ndarray, np.ndarray]:
    codes, scales, mask = quantize_quest(x, group_size, ratio_lo)
    return _values_from(codes, scales, group_size, x.shape[1]), mask


def fwht(x: np.ndarray, g: int) -> np.ndarray:
    """Orthonormal fast Walsh-Hadamard transform of each length-g block.

    Applies along the last axis; butterfly stages run at ascending stride
    with a 1/sqrt(2) factor per stage.  The per-element operation sequence
    matches the compiled kernel exactly.
    """
    rows, n = x.shape
    c = np.asarray(1.0 / np.sqrt(2.0), dtype=x.dtype)
    v = x.reshape(rows * (n // g), g).copy()
    h = 1
    while h < g:
        v4 = v.reshape(-1, g // (2 * h), 2, h)
        a = v4[:, :, 0, :]
        b = v4[:, :, 1, :]
        s = (a + b) * c
        d = (a - b) * c
        v4[:, :, 0, :] = s
        v4[:, :, 1, :] = d
        h *= 2
    return v.reshape(rows, n)


def gemm_nt(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """C = A @ B.T with strictly ascending-k accumulation in A's dtype."""
    m, k = a.shape
    n = b.shape[0]
    c = np.zeros((m, n), dtype=a.dtype)
    tmp = np.empty((m, n), dtype=a.dtype)
    for kk in range(k):
        np.multiply(a[:, kk, None], b[None, :, kk], out=tmp)
        c += tmp
    return c
