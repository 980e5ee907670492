"""Simulated MXFP4 fully-quantized training toolkit.

Bit-exact MXFP4 encode/decode, blockwise Hadamard transforms, the three
group-scaled quantizers (RTN, stochastic rounding, error-minimizing clip
search), a fully-quantized linear layer with quantized backward pass,
gradient-quality diagnostics, a precision-aware scaling-law toolkit, and a
small training harness.
"""

from ._backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
