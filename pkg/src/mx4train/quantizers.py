"""The three forward/backward quantization schemes.

All three produce an MXFP4 tensor plus a keep-mask over un-clipped
positions:

- rtn_absmax: deterministic round-to-nearest with per-group absmax scales;
  never clips, mask is all-true.
- sr_absmax: stochastic rounding between neighboring grid points with
  probabilities proportional to the distances, unbiased per element;
  mask is all-true.
- quest: per-group search over power-of-two scales minimizing squared
  reconstruction error, clipping allowed; the mask marks elements with
  |x/s| <= 6 at the chosen scale.  Inputs are expected to already be in
  the Hadamard domain (the caller applies the transform).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._backend import kernels
from .codec import GROUP_SIZE, QuantizedTensor, pack_nibbles, _validate_matrix

KINDS = ("rtn_absmax", "sr_absmax", "quest")


@dataclass(frozen=True)
class QuantScheme:
    """Quantizer selection plus its knobs.

    kind fully determines the scale rule, rounding mode, and mask semantics.
    clip_range bounds the per-group scale search of the quest scheme as
    fractions of the group absmax mapped to the grid max; clip_candidates
    log-spaced candidates snap to power-of-two scales, and since the grid of
    candidates is dense the search enumerates each distinct snapped scale in
    the range exactly once.
    """

    kind: str
    group_size: int = GROUP_SIZE
    clip_candidates: int = 64
    clip_range: tuple[float, float] = (1.0 / 16.0, 1.0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scheme kind {self.kind!r}")
        lo, hi = self.clip_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"invalid clip_range {self.clip_range}")
        if self.clip_candidates < 2:
            raise ValueError("clip_candidates must be >= 2")


RTN_ABSMAX = QuantScheme("rtn_absmax")
SR_ABSMAX = QuantScheme("sr_absmax")
QUEST = QuantScheme("quest")


def _wrap(x, codes, scales, group_size) -> QuantizedTensor:
    return QuantizedTensor(
        rows=x.shape[0],
        cols=x.shape[1],
        codes=pack_nibbles(codes),
        scales=scales,
        group_size=group_size,
    )


def quantize_rtn_absmax(
    m: np.ndarray, group_size: int = GROUP_SIZE
) -> tuple[QuantizedTensor, np.ndarray]:
    x = _validate_matrix(m)
    codes, scales = kernels.quantize_rtn(x, group_size)
    return _wrap(x, codes, scales, group_size), np.ones(x.shape, dtype=bool)


def quantize_sr_absmax(
    m: np.ndarray, seed: int, counter_start: int = 0, group_size: int = GROUP_SIZE
) -> tuple[QuantizedTensor, np.ndarray]:
    x = _validate_matrix(m)
    codes, scales = kernels.quantize_sr(x, group_size, seed & 0xFFFFFFFFFFFFFFFF, counter_start)
    return _wrap(x, codes, scales, group_size), np.ones(x.shape, dtype=bool)


def quantize_quest(
    m_hadamard_domain: np.ndarray, scheme: QuantScheme = QUEST
) -> tuple[QuantizedTensor, np.ndarray]:
    x = _validate_matrix(m_hadamard_domain)
    codes, scales, mask = kernels.quantize_quest(x, scheme.group_size, scheme.clip_range[0])
    return _wrap(x, codes, scales, scheme.group_size), mask.astype(bool)


def apply_scheme(
    m: np.ndarray,
    scheme: QuantScheme,
    seed: int | None = None,
    counter_start: int = 0,
) -> tuple[QuantizedTensor, np.ndarray]:
    """Quantize with the selected scheme; seed is consumed only by sr_absmax."""
    if scheme.kind == "rtn_absmax":
        return quantize_rtn_absmax(m, scheme.group_size)
    if scheme.kind == "sr_absmax":
        if seed is None:
            raise ValueError("sr_absmax requires a seed")
        return quantize_sr_absmax(m, seed, counter_start, scheme.group_size)
    return quantize_quest(m, scheme)
