"""Counter-based deterministic random streams.

All randomness in the package flows through keyed splitmix64 streams: the
value at position ``i`` of stream ``(seed, domain)`` is a pure function of
``(seed, domain, i)``.  This makes every consumer independent of traversal
order and of how work is partitioned, and lets the compiled backend
reproduce the exact same draws from plain C integer arithmetic.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_MIX_A = _U64(0xBF58476D1CE4E5B9)
_MIX_B = _U64(0x94D049BB133111EB)

# Domain tags keep unrelated consumers of the same user seed decorrelated.
DOMAIN_SR = 0x5352
DOMAIN_SIGNS = 0x5347
DOMAIN_GAUSS = 0x4755
DOMAIN_DERIVE = 0x4456


def mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer on a uint64 array."""
    z = (z ^ (z >> _U64(30))) * _MIX_A
    z = (z ^ (z >> _U64(27))) * _MIX_B
    return z ^ (z >> _U64(31))


def _stream_base(seed: int, domain: int) -> np.uint64:
    s = np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    d = np.array([domain & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return mix64(s ^ mix64(d))[0]


def raw_at(seed: int, domain: int, indices: np.ndarray) -> np.ndarray:
    """uint64 hash values at the given stream positions."""
    idx = np.asarray(indices, dtype=np.uint64)
    base = _stream_base(seed, domain)
    return mix64(base + (idx + _U64(1)) * _GOLDEN)


def uniform_at(seed: int, domain: int, indices: np.ndarray) -> np.ndarray:
    """Uniform doubles in [0, 1) at the given stream positions."""
    h = raw_at(seed, domain, indices)
    return (h >> _U64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def uniform(seed: int, domain: int, start: int, count: int) -> np.ndarray:
    return uniform_at(seed, domain, np.arange(start, start + count, dtype=np.uint64))


def signs(seed: int, start: int, count: int, dtype=np.float64) -> np.ndarray:
    """+-1 sign vector from stream positions [start, start+count)."""
    h = raw_at(seed, DOMAIN_SIGNS, np.arange(start, start + count, dtype=np.uint64))
    out = np.ones(count, dtype=dtype)
    out[(h >> _U64(63)) == _U64(1)] = -1.0
    return out


def gaussians(seed: int, domain: int, start: int, count: int) -> np.ndarray:
    """Standard normals via the inverse CDF; open-interval uniforms keep ndtri finite."""
    h = raw_at(seed, domain, np.arange(start, start + count, dtype=np.uint64))
    u = ((h >> _U64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)
    return ndtri(u)


def derive_seed(*parts: int) -> int:
    """Fold integer components into a new 64-bit seed."""
    acc = np.array([0x243F6A8885A308D3], dtype=np.uint64)
    for p in parts:
        acc = mix64(acc ^ np.array([p & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
        acc = acc + _GOLDEN
    return int(mix64(acc)[0])
