"""Blockwise orthonormal Walsh-Hadamard transforms.

The fixed transform applies an orthonormal length-g butterfly network to
each contiguous block along one matrix axis.  The randomized variant flips
signs with a seeded counter-based stream before transforming; two calls
with the same seed use identical sign vectors for equal positions along the
transformed axis, which is what makes the signs cancel between the two
operands of a gradient GEMM.

Axis lengths must be divisible by g; callers pad explicitly (silent padding
would shift quantization-group alignment).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from ._backend import kernels

MAX_BLOCK = 256


@dataclass(frozen=True)
class HadamardConfig:
    block_size: int = 32
    axis: str = "cols"
    seed: int | None = None

    def __post_init__(self):
        g = self.block_size
        if g < 2 or g > MAX_BLOCK or (g & (g - 1)) != 0:
            raise ValueError(f"block_size must be a power of two in [2, {MAX_BLOCK}], got {g}")
        if self.axis not in ("rows", "cols"):
            raise ValueError(f"axis must be 'rows' or 'cols', got {self.axis!r}")


def _as_matrix(m: np.ndarray) -> np.ndarray:
    x = np.asarray(m)
    if x.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    return x


def _check_length(n: int, g: int):
    if n % g != 0:
        raise ValueError(f"axis length {n} not divisible by block size {g}")


def fwht_block(v: np.ndarray) -> np.ndarray:
    """Orthonormal Hadamard transform of one power-of-two-length vector."""
    x = np.asarray(v)
    if x.ndim != 1:
        raise ValueError("expected a 1-D vector")
    g = x.shape[0]
    if g < 2 or (g & (g - 1)) != 0:
        raise ValueError(f"length must be a power of two >= 2, got {g}")
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    return kernels.fwht(np.ascontiguousarray(x.reshape(1, g)), g)[0]


def _apply_last(m: np.ndarray, g: int) -> np.ndarray:
    _check_length(m.shape[1], g)
    return kernels.fwht(np.ascontiguousarray(m), g)


def transform_last_axis(m: np.ndarray, g: int) -> np.ndarray:
    """Fixed blockwise transform along the last axis (no config object)."""
    return _apply_last(_as_matrix(m), g)


def sign_vector(seed: int, length: int, dtype=np.float64) -> np.ndarray:
    """The +-1 flip vector for positions [0, length) along a transformed axis."""
    return rng.signs(seed, 0, length, dtype=dtype)


def randomized_transform_last_axis(m: np.ndarray, g: int, seed: int) -> np.ndarray:
    x = _as_matrix(m)
    d = sign_vector(seed, x.shape[1], dtype=x.dtype)
    return _apply_last(x * d, g)


def inverse_randomized_transform_last_axis(m: np.ndarray, g: int, seed: int) -> np.ndarray:
    x = _as_matrix(m)
    d = sign_vector(seed, x.shape[1], dtype=x.dtype)
    return _apply_last(x, g) * d


def _with_axis(m: np.ndarray, cfg: HadamardConfig, fn) -> np.ndarray:
    x = _as_matrix(m)
    if cfg.axis == "rows":
        return np.ascontiguousarray(fn(np.ascontiguousarray(x.T)).T)
    return fn(x)


def hadamard_blockwise(m: np.ndarray, cfg: HadamardConfig) -> np.ndarray:
    """Fixed transform applied independently to each length-g block."""
    return _with_axis(m, cfg, lambda x: _apply_last(x, cfg.block_size))


def randomized_hadamard(m: np.ndarray, cfg: HadamardConfig) -> np.ndarray:
    """Seeded sign flips followed by the fixed transform."""
    if cfg.seed is None:
        raise ValueError("randomized transform requires cfg.seed")
    return _with_axis(
        m, cfg, lambda x: randomized_transform_last_axis(x, cfg.block_size, cfg.seed)
    )


def inverse_hadamard(m: np.ndarray, cfg: HadamardConfig) -> np.ndarray:
    """Inverse transform.

    The fixed transform is involutive, so its inverse is itself.  When
    cfg.seed is set the inverse of the randomized transform is applied:
    transform first, then flip with the same sign vector.
    """
    if cfg.seed is None:
        return hadamard_blockwise(m, cfg)
    return _with_axis(
        m, cfg, lambda x: inverse_randomized_transform_last_axis(x, cfg.block_size, cfg.seed)
    )


def dense_block_matrix(g: int, dtype=np.float64) -> np.ndarray:
    """Dense orthonormal Hadamard matrix of size g (test oracle)."""
    h = np.array([[1.0]], dtype=np.float64)
    while h.shape[0] < g:
        h = np.block([[h, h], [h, -h]])
    return (h / np.sqrt(g)).astype(dtype)
