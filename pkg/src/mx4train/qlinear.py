"""Fully-quantized linear layer.

Forward: both operands go through a fixed blockwise Hadamard transform
along the input dimension, are quantized (error-minimizing clip search by
default, keeping the clip masks), and multiply in simulated MXFP4: operands
are dequantized to element-value times scale and accumulated in the policy
precision with a fixed reduction order.

Backward: both gradient GEMMs decorrelate their operands with the same
seeded randomized Hadamard transform along the contraction axis (the seeds
cancel inside the product), pre-scale by 3/4, re-quantize with deterministic
or stochastic rounding, multiply in simulated MXFP4, apply the saved clip
masks, invert the fixed transform along the input dimension, and rescale by
16/9.  The 3/4 factors compensate the round-to-nearest range matching and
(3/4)^2 * (16/9) = 1, so with identity quantizers the layer reduces to a
plain linear layer.

Layers are bias-free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from ._backend import kernels
from .codec import QuantizedTensor, dequantize
from .hadamard import (
    randomized_transform_last_axis,
    transform_last_axis,
)
from .quantizers import QUEST, QuantScheme, apply_scheme, quantize_rtn_absmax, quantize_sr_absmax

PRE_SCALE = 0.75
POST_SCALE = 16.0 / 9.0

# rng sub-stream tags for stochastic rounding inside one backward pass
_TAG_FWD_X, _TAG_FWD_W = 11, 12
_TAG_BWD_G1, _TAG_BWD_W, _TAG_BWD_G2, _TAG_BWD_X = 21, 22, 23, 24


@dataclass(frozen=True)
class GemmPolicy:
    """Accumulation precision and operand path of the simulated GEMMs.

    The exact operand path bypasses quantization entirely (for testing);
    it must make forward/backward equal a plain linear layer.
    """

    accumulation: str = "single"
    operand_path: str = "quantized"

    def __post_init__(self):
        if self.accumulation not in ("single", "double"):
            raise ValueError(f"unknown accumulation {self.accumulation!r}")
        if self.operand_path not in ("quantized", "exact"):
            raise ValueError(f"unknown operand path {self.operand_path!r}")

    @property
    def work_dtype(self):
        return np.float64 if self.accumulation == "double" else np.float32

    @property
    def exact(self) -> bool:
        return self.operand_path == "exact"


DEFAULT_POLICY = GemmPolicy()
EXACT_POLICY = GemmPolicy(accumulation="double", operand_path="exact")


@dataclass
class LayerContext:
    """Saved forward state consumed by the backward pass."""

    x_q: QuantizedTensor | np.ndarray
    w_q: QuantizedTensor | np.ndarray
    m_x: np.ndarray
    m_w: np.ndarray
    scheme: QuantScheme
    policy: GemmPolicy
    hadamard: bool
    batch: int
    d_in: int
    d_out: int


def _values(operand, dtype) -> np.ndarray:
    if isinstance(operand, QuantizedTensor):
        return dequantize(operand, dtype=dtype)
    return np.asarray(operand, dtype=dtype)


def gemm_lp(a_q, b_q, policy: GemmPolicy = DEFAULT_POLICY) -> np.ndarray:
    """dequantize(A) @ dequantize(B).T with policy-precision accumulation.

    Both operands carry their scale groups along the contraction axis, which
    therefore must match in length and group size.
    """
    if isinstance(a_q, QuantizedTensor) and isinstance(b_q, QuantizedTensor):
        if a_q.cols != b_q.cols:
            raise ValueError(f"contraction mismatch: {a_q.cols} vs {b_q.cols}")
        if a_q.group_size != b_q.group_size:
            raise ValueError("mismatched group sizes")
    a = _values(a_q, policy.work_dtype)
    b = _values(b_q, policy.work_dtype)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"contraction mismatch: {a.shape[1]} vs {b.shape[1]}")
    return kernels.gemm_nt(np.ascontiguousarray(a), np.ascontiguousarray(b))


def forward(
    x: np.ndarray,
    w: np.ndarray,
    scheme: QuantScheme = QUEST,
    policy: GemmPolicy = DEFAULT_POLICY,
    hadamard: bool = True,
    seed: int | None = None,
) -> tuple[np.ndarray, LayerContext]:
    """y = x @ w.T through the quantized pipeline; returns (y, context).

    seed feeds forward stochastic rounding only (sr_absmax scheme).
    """
    dt = policy.work_dtype
    x = np.asarray(x, dtype=dt)
    w = np.asarray(w, dtype=dt)
    if x.ndim != 2 or w.ndim != 2:
        raise ValueError("x and w must be 2-D")
    batch, d_in = x.shape
    d_out, d_in_w = w.shape
    if d_in != d_in_w:
        raise ValueError(f"shape mismatch: x has {d_in} features, w has {d_in_w}")
    g = scheme.group_size
    if d_in % g != 0:
        raise ValueError(f"input dimension {d_in} not divisible by block size {g}")

    if hadamard:
        x_h = transform_last_axis(x, g)
        w_h = transform_last_axis(w, g)
    else:
        x_h, w_h = x, w

    if policy.exact:
        x_q, m_x = x_h, np.ones(x_h.shape, dtype=bool)
        w_q, m_w = w_h, np.ones(w_h.shape, dtype=bool)
        y = kernels.gemm_nt(np.ascontiguousarray(x_h), np.ascontiguousarray(w_h))
    else:
        sx = sw = None
        if scheme.kind == "sr_absmax":
            if seed is None:
                raise ValueError("sr_absmax forward requires a seed")
            sx = rng.derive_seed(seed, _TAG_FWD_X)
            sw = rng.derive_seed(seed, _TAG_FWD_W)
        x_q, m_x = apply_scheme(x_h, scheme, seed=sx)
        w_q, m_w = apply_scheme(w_h, scheme, seed=sw)
        y = gemm_lp(x_q, w_q, policy)

    ctx = LayerContext(
        x_q=x_q, w_q=w_q, m_x=m_x, m_w=m_w,
        scheme=scheme, policy=policy, hadamard=hadamard,
        batch=batch, d_in=d_in, d_out=d_out,
    )
    return y, ctx


def _quantize_backward(mat: np.ndarray, rounding: str, xi: int, tag: int):
    if rounding == "rtn":
        q, _ = quantize_rtn_absmax(mat)
        return q
    if rounding == "sr":
        q, _ = quantize_sr_absmax(mat, rng.derive_seed(xi, tag))
        return q
    raise ValueError(f"unknown backward rounding {rounding!r}")


def backward(
    dy: np.ndarray,
    ctx: LayerContext,
    xi: int,
    rounding: str = "rtn",
) -> tuple[np.ndarray, np.ndarray]:
    """Input and weight gradients from the saved context and upstream dy.

    rounding selects the backward re-quantization: "rtn" (the default),
    "sr", or "exact" to skip backward quantization entirely (the saved
    context may still hold quantized forward values).  xi seeds the
    randomized Hadamard sign flips and, for stochastic rounding, the
    per-tensor rounding streams; identical inputs and xi give bit-identical
    outputs.
    """
    if rounding not in ("exact", "rtn", "sr"):
        raise ValueError(f"unknown backward rounding {rounding!r}")
    dt = ctx.policy.work_dtype
    dy = np.asarray(dy, dtype=dt)
    if dy.shape != (ctx.batch, ctx.d_out):
        raise ValueError(f"dy shape {dy.shape}, expected {(ctx.batch, ctx.d_out)}")
    g = ctx.scheme.group_size
    if ctx.hadamard:
        if ctx.d_out % g != 0:
            raise ValueError(f"output dimension {ctx.d_out} not divisible by block size {g}")
        if ctx.batch % g != 0:
            raise ValueError(f"batch size {ctx.batch} not divisible by block size {g}")

    w_val = _values(ctx.w_q, dt)
    x_val = _values(ctx.x_q, dt)
    exact = rounding == "exact"
    pre = dt(PRE_SCALE)
    post = dt(POST_SCALE)

    # input gradient: contract over d_out
    if ctx.hadamard:
        g_h = randomized_transform_last_axis(dy, g, xi)
        w_t = randomized_transform_last_axis(np.ascontiguousarray(w_val.T), g, xi)
    else:
        g_h = dy
        w_t = np.ascontiguousarray(w_val.T)
    g_h = g_h * pre
    w_t = w_t * pre
    if exact:
        dx_q = kernels.gemm_nt(np.ascontiguousarray(g_h), np.ascontiguousarray(w_t))
    else:
        dx_q = gemm_lp(
            _quantize_backward(g_h, rounding, xi, _TAG_BWD_G1),
            _quantize_backward(w_t, rounding, xi, _TAG_BWD_W),
            ctx.policy,
        )
    dx_q = dx_q * ctx.m_x.astype(dt)
    dx = (transform_last_axis(dx_q, g) if ctx.hadamard else dx_q) * post

    # weight gradient: contract over batch
    if ctx.hadamard:
        g_t = randomized_transform_last_axis(np.ascontiguousarray(dy.T), g, xi)
        x_t = randomized_transform_last_axis(np.ascontiguousarray(x_val.T), g, xi)
    else:
        g_t = np.ascontiguousarray(dy.T)
        x_t = np.ascontiguousarray(x_val.T)
    g_t = g_t * pre
    x_t = x_t * pre
    if exact:
        dw_q = kernels.gemm_nt(np.ascontiguousarray(g_t), np.ascontiguousarray(x_t))
    else:
        dw_q = gemm_lp(
            _quantize_backward(g_t, rounding, xi, _TAG_BWD_G2),
            _quantize_backward(x_t, rounding, xi, _TAG_BWD_X),
            ctx.policy,
        )
    dw_q = dw_q * ctx.m_w.astype(dt)
    dw = (transform_last_axis(dw_q, g) if ctx.hadamard else dw_q) * post

    return dx, dw
