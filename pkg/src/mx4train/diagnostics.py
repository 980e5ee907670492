"""Quantization-quality metrics.

Per-element mean squared error on Gaussian data, the projection-magnitude
misalignment 1 - E[1/S] of a quantizer composed with the randomized
Hadamard transform, and layerwise cosine/misalignment profiles of
backpropagated gradients.  Every Monte Carlo estimate carries its standard
error and is bit-reproducible given (seed, samples).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import rng
from ._backend import kernels
from .hadamard import transform_last_axis
from .quantizers import GROUP_SIZE, QUEST

SCHEME_IDS = ("exact", "rtn_absmax", "sr_absmax", "quest")

_DOMAIN_XI = 0x5849
_DOMAIN_SRQ = 0x5153


@dataclass(frozen=True)
class MonteCarloEstimate:
    value: float
    stderr: float
    samples: int
    seed: int
    excluded: int = 0


@dataclass
class AlignmentReport:
    """Backward-gradient quality of one scheme pair on one model."""

    scheme: str
    mse: float
    misalignment: float
    cosine_by_depth: list[tuple[int, float]]
    misalignment_by_depth: list[tuple[int, float]]
    samples: int
    seed: int


def _quantize_values(x: np.ndarray, kind: str, seed: int) -> np.ndarray:
    """Quantize-dequantize a matrix with the named scheme (rows are samples)."""
    xc = np.ascontiguousarray(x, dtype=np.float64)
    if kind == "exact":
        return xc
    if kind == "rtn_absmax":
        return kernels.rtn_values(xc, GROUP_SIZE)
    if kind == "sr_absmax":
        return kernels.sr_values(xc, GROUP_SIZE, seed & 0xFFFFFFFFFFFFFFFF, 0)
    if kind == "quest":
        return kernels.quest_values(xc, GROUP_SIZE, QUEST.clip_range[0])[0]
    raise ValueError(f"unknown scheme {kind!r}")


def gaussian_mse(
    kind: str, dim: int = 4096, samples: int = 256, seed: int = 0, batch: int = 512
) -> MonteCarloEstimate:
    """Mean per-element squared reconstruction error on N(0, I) vectors.

    The quest scheme follows its Hadamard-domain convention: vectors are
    transformed first and the error is measured in the transformed domain
    (the transform is orthonormal, so the error equals the original-domain
    error of the full pipeline).
    """
    if dim % GROUP_SIZE:
        raise ValueError(f"dim must be a multiple of {GROUP_SIZE}")
    per_vector = np.empty(samples)
    done = 0
    while done < samples:
        b = min(batch, samples - done)
        x = rng.gaussians(seed, rng.DOMAIN_GAUSS, done * dim, b * dim).reshape(b, dim)
        if kind == "quest":
            x = transform_last_axis(x, GROUP_SIZE)
        d = _quantize_values(x, kind, rng.derive_seed(seed, _DOMAIN_SRQ, done))
        per_vector[done : done + b] = ((x - d) ** 2).mean(axis=1)
        done += b
    value = float(per_vector.mean())
    stderr = float(per_vector.std(ddof=1) / np.sqrt(samples)) if samples > 1 else 0.0
    return MonteCarloEstimate(value=value, stderr=stderr, samples=samples, seed=seed)


def rescale_factor_S(x: np.ndarray, xi: int, kind: str = "rtn_absmax", seed: int = 0) -> float:
    """S = <x, x> / <H(x, xi), q(H(x, xi))> for one vector.

    q is the selected quantize-dequantize; the randomized transform uses the
    sign stream keyed by xi.  A zero denominator raises.
    """
    v = np.asarray(x, dtype=np.float64).reshape(1, -1)
    n = v.shape[1]
    if n % GROUP_SIZE:
        raise ValueError(f"length must be a multiple of {GROUP_SIZE}")
    if not np.any(v):
        raise ValueError("zero input vector")
    d = rng.signs(xi, 0, n)
    y = transform_last_axis(v * d, GROUP_SIZE)
    qy = _quantize_values(y, kind, seed)
    den = float((y * qy).sum())
    if den == 0.0:
        raise ZeroDivisionError("degenerate quantization: zero denominator")
    return float((v * v).sum()) / den


def _flipped_gaussian_batch(seed: int, start: int, count: int, dim: int) -> np.ndarray:
    """Sign-flipped standard normals, one counter-based stream per sample.

    Sample i draws from a Philox stream keyed by (seed, i): dim normals for
    the vector, then dim bits for the randomized-transform sign flips, so
    each (x, xi) pair is a pure function of (seed, i).
    """
    out = np.empty((count, dim))
    key_hi = rng.derive_seed(seed, _DOMAIN_XI)
    for i in range(count):
        gen = np.random.Generator(np.random.Philox(key=np.array(
            [key_hi, start + i], dtype=np.uint64)))
        x = gen.standard_normal(dim)
        flips = gen.integers(0, 2, size=dim)
        np.multiply(x, 1.0 - 2.0 * flips, out=out[i])
    return out


def misalignment_suite(
    kinds: tuple[str, ...],
    dim: int = 2048,
    samples: int = 100_000,
    seed: int = 0,
    batch: int = 2048,
) -> dict[str, MonteCarloEstimate]:
    """1 - E[1/S] for several schemes over one shared sample stream.

    Sharing the (x, xi) draws across schemes is plain common-random-numbers
    variance reduction; each scheme's estimate is unchanged in expectation.
    Degenerate samples (zero denominator) are excluded and counted.
    """
    if dim % GROUP_SIZE:
        raise ValueError(f"dim must be a multiple of {GROUP_SIZE}")
    for kind in kinds:
        if kind not in SCHEME_IDS:
            raise ValueError(f"unknown scheme {kind!r}")
    inv_s = {kind: np.empty(samples) for kind in kinds}
    done = 0
    while done < samples:
        b = min(batch, samples - done)
        flipped = _flipped_gaussian_batch(seed, done, b, dim)
        y = transform_last_axis(flipped, GROUP_SIZE)
        # the transform preserves norms, so <x, x> = <flipped, flipped>
        den = (flipped * flipped).sum(axis=1)
        bad = den == 0.0
        for kind in kinds:
            qy = _quantize_values(y, kind, rng.derive_seed(seed, _DOMAIN_SRQ, done))
            num = (y * qy).sum(axis=1)
            vals = np.divide(num, den, out=np.full(b, np.nan), where=~bad)
            inv_s[kind][done : done + b] = vals
        done += b
    out = {}
    for kind in kinds:
        good = inv_s[kind][np.isfinite(inv_s[kind])]
        excluded = samples - good.size
        value = float(1.0 - good.mean())
        stderr = float(good.std(ddof=1) / np.sqrt(good.size)) if good.size > 1 else 0.0
        out[kind] = MonteCarloEstimate(
            value=value, stderr=stderr, samples=samples, seed=seed, excluded=excluded
        )
    return out


def misalignment(
    kind: str, dim: int = 2048, samples: int = 100_000, seed: int = 0, batch: int = 2048
) -> MonteCarloEstimate:
    """1 - E[1/S] over fresh (x, xi) pairs; degenerate samples are excluded.

    Zero for any unbiased rounding scheme, positive when quantization
    shrinks the projection onto the input.  The estimate is insensitive to
    dim (the ratio self-averages, with O(1/dim) corrections); the default
    trades a factor of two of runtime against the 4096 used elsewhere.
    """
    return misalignment_suite((kind,), dim=dim, samples=samples, seed=seed, batch=batch)[kind]


def gradient_depth_profile(model, x: np.ndarray, pair, seed: int) -> AlignmentReport:
    """Per-layer gradient quality of a quantized backward pass.

    Both backward passes start from the same weights, the same activations
    (exact forward), and the same top-level gradient; the quantized leg uses
    contexts from a quantized forward with the pair's forward scheme and the
    pair's backward rounding.  Depth d counts layers below the loss, so the
    profile at the largest layer index is the gradient entering the first
    layer.
    """
    from . import train as _train

    exact_pair = _train.SchemePair("exact", "exact")
    acts, _ = _train.model_forward(model, x, exact_pair, seed=seed, step=0)
    dy = rng.gaussians(rng.derive_seed(seed, 0x4459), rng.DOMAIN_GAUSS, 0, acts[-1].size)
    dy = (dy / np.linalg.norm(dy)).reshape(acts[-1].shape)

    grads_exact = _train.activation_gradients(model, acts, dy, exact_pair, xi=seed)
    grads_quant = _train.activation_gradients(model, acts, dy, pair, xi=seed)

    cos_rows, mis_rows = [], []
    for layer, (ge, gq) in enumerate(zip(grads_exact, grads_quant)):
        ge_f = ge.astype(np.float64).ravel()
        gq_f = gq.astype(np.float64).ravel()
        denom = float(np.linalg.norm(ge_f) * np.linalg.norm(gq_f))
        cos = float(ge_f @ gq_f) / denom if denom else 1.0
        ee = float(ge_f @ ge_f)
        mis = 1.0 - float(gq_f @ ge_f) / ee if ee else 0.0
        cos_rows.append((layer, cos))
        mis_rows.append((layer, mis))
    return AlignmentReport(
        scheme=f"{pair.forward}:{pair.backward}",
        mse=float(gaussian_mse(pair.forward if pair.forward != "exact" else "exact",
                               dim=1024, samples=64, seed=seed).value),
        misalignment=mis_rows[0][1],
        cosine_by_depth=cos_rows,
        misalignment_by_depth=mis_rows,
        samples=x.shape[0],
        seed=seed,
    )


@dataclass
class MetricRow:
    scheme: str
    metric: str
    value: float
    stderr: float
    samples: int
    seed: int


def write_metrics_csv(path, rows: list[MetricRow]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scheme", "metric", "value", "stderr", "samples", "seed"])
        for r in rows:
            w.writerow([r.scheme, r.metric, repr(r.value), repr(r.stderr), r.samples, r.seed])


def write_metrics_json(path, rows: list[MetricRow]):
    with open(path, "w") as f:
        json.dump([r.__dict__ for r in rows], f, indent=2, sort_keys=True)
        f.write("\n")
