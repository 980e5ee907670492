"""Kernel backend selection.

The hot kernels (quantization, blockwise Hadamard, fixed-order GEMM) exist
twice: a compiled Cython extension and a pure-numpy fallback with identical
bit-level behavior.  The extension is used when importable; set
MX4TRAIN_BACKEND=numpy or MX4TRAIN_BACKEND=native to force a choice.
"""

from __future__ import annotations

import os

from . import _numpy

try:
    from . import _native
except ImportError:
    _native = None

_choice = os.environ.get("MX4TRAIN_BACKEND", "auto").lower()
if _choice == "numpy":
    kernels = _numpy
elif _choice == "native":
    if _native is None:
        raise ImportError(
            "MX4TRAIN_BACKEND=native but the compiled extension is not available; "
            "reinstall the package or unset the variable"
        )
    kernels = _native
elif _choice == "auto":
    kernels = _native if _native is not None else _numpy
else:
    raise ValueError(f"unknown MX4TRAIN_BACKEND value: {_choice!r}")

BACKEND = kernels.NAME


def available_backends() -> dict[str, object]:
    out = {"numpy": _numpy}
    if _native is not None:
        out["native"] = _native
    return out
