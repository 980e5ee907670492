"""Bit-exact MXFP4 codec.

An MXFP4 tensor stores one signed 4-bit element code (1 sign, 2 exponent,
1 mantissa) per value and one 8-bit power-of-two scale per 1-D group of 32
elements along each row.  This module owns the bit layout, the rounding
rules, and the on-disk container; it performs no transforms.

Scale rule: the group scale is the smallest power of two s such that
absmax(group)/s <= 6, so round-to-nearest never clips.  Rounding ties
resolve half-to-even on the mantissa bit.  Negative zero canonicalizes to
+0 on encode.  Dequantization is exact in double precision.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from ._backend import kernels
from ._backend._numpy import GRID as _GRID

GROUP_SIZE = 32

_MAGIC = b"MXF4"
_VERSION = 1
_HEADER = struct.Struct("<4sHIIHH")

# decode table for all 16 nibbles (low 3 bits index the magnitude grid)
_DECODE = np.concatenate([_GRID, -_GRID])


class FormatError(ValueError):
    """Malformed serialized payload (bad magic, truncation, invalid bytes)."""


@dataclass(frozen=True)
class QuantizedTensor:
    """Packed MXFP4 matrix.

    codes holds two element nibbles per byte, row-major, element 2k in the
    low nibble and 2k+1 in the high nibble; the final byte of a row is
    zero-padded when cols is odd.  scales holds one biased exponent byte per
    group of group_size elements along each row; the trailing group may be
    short when cols is not a multiple of group_size.
    """

    rows: int
    cols: int
    codes: np.ndarray
    scales: np.ndarray
    group_size: int = GROUP_SIZE

    def __post_init__(self):
        if self.rows < 0 or self.cols < 0:
            raise ValueError("negative shape")
        ngroups = -(-self.cols // self.group_size)
        if self.codes.shape != (self.rows, (self.cols + 1) // 2):
            raise ValueError("codes shape does not match rows/cols")
        if self.scales.shape != (self.rows, ngroups):
            raise ValueError("scales shape does not match rows/cols")
        if self.codes.dtype != np.uint8 or self.scales.dtype != np.uint8:
            raise ValueError("codes and scales must be uint8")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def dequantize(self, dtype=np.float64) -> np.ndarray:
        return dequantize(self, dtype=dtype)


def e2m1_grid() -> np.ndarray:
    """The 8 non-negative representable magnitudes, ascending."""
    return _GRID.copy()


def e2m1_decode(code) -> np.ndarray | float:
    """Decoded value of 4-bit code(s); both zero codes decode to 0.0."""
    c = np.asarray(code)
    if np.any((c < 0) | (c > 15)):
        raise ValueError("E2M1 code out of range")
    out = _DECODE[c]
    return float(out) if np.isscalar(code) or out.ndim == 0 else out


def e2m1_encode(value: float) -> int:
    """Exact encode of a representable value; -0 canonicalizes to +0."""
    v = float(value)
    if v == 0.0:
        return 0
    hits = np.nonzero(_DECODE == v)[0]
    if len(hits) == 0:
        raise ValueError(f"{value!r} is not representable in E2M1")
    return int(hits[0])


def e8m0_decode(exponent) -> np.ndarray | float:
    """Scale value 2**(e-127); e = 255 is reserved and rejected."""
    e = np.asarray(exponent)
    if np.any(e == 255):
        raise ValueError("reserved E8M0 exponent 255")
    if np.any((e < 0) | (e > 254)):
        raise ValueError("E8M0 exponent out of range")
    out = np.ldexp(1.0, e.astype(np.int32) - 127)
    return float(out) if np.isscalar(exponent) or out.ndim == 0 else out


def rtn_to_grid(x: float) -> int:
    """Nearest E2M1 code for a scalar; |x| > 6 clamps to the grid max."""
    if not math.isfinite(x):
        raise ValueError("non-finite input")
    idx = _grid_index_scalar(abs(x))
    if idx == 0:
        return 0
    return idx | (8 if math.copysign(1.0, x) < 0 else 0)


def _grid_index_scalar(a: float) -> int:
    idx = int(a > 0.25)
    idx += a >= 0.75
    idx += a > 1.25
    idx += a >= 1.75
    idx += a > 2.5
    idx += a >= 3.5
    idx += a > 5.0
    return idx


def absmax_scale(group: np.ndarray) -> int:
    """Biased scale exponent for one group: ceil(log2(absmax/6)), clamped."""
    g = np.asarray(group, dtype=np.float64)
    if g.size == 0:
        raise ValueError("empty group")
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite input")
    amax = float(np.max(np.abs(g)))
    if amax == 0.0:
        return 0
    m, e2 = math.frexp(amax / 6.0)
    return int(np.clip(127 + e2 - (1 if m == 0.5 else 0), 0, 254))


def pack_nibbles(codes: np.ndarray) -> np.ndarray:
    """Pack per-element nibbles (rows x cols) into bytes, two per byte."""
    rows, cols = codes.shape
    if cols % 2:
        codes = np.concatenate([codes, np.zeros((rows, 1), dtype=np.uint8)], axis=1)
    lo = codes[:, 0::2]
    hi = codes[:, 1::2]
    return (lo | (hi << 4)).astype(np.uint8)


def unpack_nibbles(packed: np.ndarray, cols: int) -> np.ndarray:
    rows = packed.shape[0]
    out = np.empty((rows, packed.shape[1] * 2), dtype=np.uint8)
    out[:, 0::2] = packed & 0x0F
    out[:, 1::2] = packed >> 4
    return out[:, :cols]


def _validate_matrix(m: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(m, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    return x


def quantize_tensor(
    m: np.ndarray,
    rounding: str = "rtn",
    seed: int | None = None,
    counter_start: int = 0,
    group_size: int = GROUP_SIZE,
) -> QuantizedTensor:
    """Quantize a dense matrix to MXFP4.

    rounding is "rtn" (deterministic nearest) or "sr" (stochastic rounding,
    requires a seed; the draw for each element is keyed by seed and the
    element's linear index offset by counter_start).
    """
    x = _validate_matrix(m)
    if rounding == "rtn":
        codes, scales = kernels.quantize_rtn(x, group_size)
    elif rounding == "sr":
        if seed is None:
            raise ValueError("stochastic rounding requires a seed")
        codes, scales = kernels.quantize_sr(x, group_size, seed & 0xFFFFFFFFFFFFFFFF, counter_start)
    else:
        raise ValueError(f"unknown rounding mode: {rounding!r}")
    return QuantizedTensor(
        rows=x.shape[0],
        cols=x.shape[1],
        codes=pack_nibbles(codes),
        scales=scales,
        group_size=group_size,
    )


def dequantize(q: QuantizedTensor, dtype=np.float64) -> np.ndarray:
    """Exact per-element product decode(code) * decode(scale), in double."""
    if np.any(q.scales == 255):
        raise ValueError("reserved E8M0 exponent 255")
    values = _DECODE[unpack_nibbles(q.codes, q.cols)]
    s = np.ldexp(1.0, q.scales.astype(np.int32) - 127)
    out = values * np.repeat(s, q.group_size, axis=1)[:, : q.cols]
    return out.astype(dtype, copy=False)


def serialize(q: QuantizedTensor) -> bytes:
    header = _HEADER.pack(_MAGIC, _VERSION, q.rows, q.cols, q.group_size, 0)
    return header + q.codes.tobytes() + q.scales.tobytes()


def deserialize(data: bytes) -> QuantizedTensor:
    if len(data) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, rows, cols, group_size, _ = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise FormatError(f"unsupported version {version}")
    if group_size == 0:
        raise FormatError("zero group size")
    ncode = rows * ((cols + 1) // 2)
    nscale = rows * (-(-cols // group_size))
    expected = _HEADER.size + ncode + nscale
    if len(data) != expected:
        raise FormatError(f"payload length {len(data)}, expected {expected}")
    codes = np.frombuffer(data, dtype=np.uint8, count=ncode, offset=_HEADER.size)
    scales = np.frombuffer(data, dtype=np.uint8, count=nscale, offset=_HEADER.size + ncode)
    if np.any(scales == 255):
        raise FormatError("invalid scale byte 255")
    return QuantizedTensor(
        rows=rows,
        cols=cols,
        codes=codes.reshape(rows, (cols + 1) // 2).copy(),
        scales=scales.reshape(rows, -(-cols // group_size)).copy(),
        group_size=group_size,
    )
