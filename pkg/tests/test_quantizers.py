import numpy as np
import pytest

from mx4train import codec, quantizers
from mx4train.diagnostics import gaussian_mse


def test_scheme_validation():
    with pytest.raises(ValueError):
        quantizers.QuantScheme(kind="nearest")
    with pytest.raises(ValueError):
        quantizers.QuantScheme(kind="quest", clip_range=(0.0, 1.0))
    with pytest.raises(ValueError):
        quantizers.QuantScheme(kind="quest", clip_candidates=1)


def test_rtn_grid_exact_and_mask():
    x = np.tile(np.array([[0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0]]), (2, 4))
    q, mask = quantizers.quantize_rtn_absmax(x)
    assert np.array_equal(codec.dequantize(q), x)
    assert mask.all() and mask.shape == x.shape


def test_rtn_scalar_oracle_equivalence():
    from test_codec import scalar_quantize_oracle

    r = np.random.default_rng(0)
    for _ in range(20):
        x = r.normal(scale=2.0 ** r.integers(-3, 4), size=(1, 32))
        q, _ = quantizers.quantize_rtn_absmax(x)
        codes, e = scalar_quantize_oracle(x[0].tolist())
        assert codec.unpack_nibbles(q.codes, 32)[0].tolist() == codes
        assert q.scales[0, 0] == e


def test_sr_grid_exact_is_deterministic():
    x = np.tile(np.array([[0.5, 1.0, -3.0, 6.0]]), (1, 8))
    q, mask = quantizers.quantize_sr_absmax(x, seed=1)
    assert np.array_equal(codec.dequantize(q), x)
    assert mask.all()


def test_sr_two_point_probabilities():
    # group pinned to scale 1 by a 6.0 entry; 2.4 must round to 2 or 3
    # with P(3) = 0.4
    n = 200_000
    x = np.zeros((n, 32))
    x[:, 0] = 6.0
    x[:, 1] = 2.4
    q, _ = quantizers.quantize_sr_absmax(x, seed=5)
    vals = codec.dequantize(q)[:, 1]
    assert set(np.unique(vals)) <= {2.0, 3.0}
    mean = vals.mean()
    se = vals.std(ddof=1) / np.sqrt(n)
    assert abs(mean - 2.4) < 3 * se + 1e-12
    assert abs((vals == 3.0).mean() - 0.4) < 0.005


def test_sr_unbiased_per_element():
    r = np.random.default_rng(3)
    base = r.normal(size=32)
    x = np.tile(base, (100_000, 1))
    q, _ = quantizers.quantize_sr_absmax(x, seed=9)
    d = codec.dequantize(q)
    mean = d.mean(axis=0)
    se = d.std(axis=0, ddof=1) / np.sqrt(x.shape[0])
    z = np.abs(mean - base) / np.where(se == 0, np.inf, se)
    assert np.sort(z)[-2] <= 3.5 and z.max() <= 6.0


def test_sr_determinism_given_seed():
    x = np.random.default_rng(4).normal(size=(8, 64))
    q1, _ = quantizers.quantize_sr_absmax(x, seed=42)
    q2, _ = quantizers.quantize_sr_absmax(x, seed=42)
    q3, _ = quantizers.quantize_sr_absmax(x, seed=43)
    assert np.array_equal(q1.codes, q2.codes)
    assert not np.array_equal(q1.codes, q3.codes)


def test_quest_grid_exact_input():
    x = np.tile(np.array([[0.5, 1.0, -3.0, 6.0, 0.0, 2.0, -4.0, 1.5]]), (3, 4))
    q, mask = quantizers.quantize_quest(x)
    assert np.array_equal(codec.dequantize(q), x)
    assert mask.all()


def test_quest_error_never_above_rtn():
    r = np.random.default_rng(5)
    for _ in range(30):
        x = r.normal(scale=2.0 ** r.integers(-2, 3), size=(4, 64))
        qq, _ = quantizers.quantize_quest(x)
        qr, _ = quantizers.quantize_rtn_absmax(x)
        err_q = ((x - codec.dequantize(qq)) ** 2).sum()
        err_r = ((x - codec.dequantize(qr)) ** 2).sum()
        assert err_q <= err_r + 1e-12


def test_quest_chosen_scale_beats_adjacent_exponents():
    # brute force: per group, the chosen exponent's error is no worse than
    # either neighboring representable exponent
    r = np.random.default_rng(6)
    x = r.normal(size=(2, 64))
    q, _ = quantizers.quantize_quest(x)

    def group_error(vals, e):
        s = codec.e8m0_decode(int(e))
        scaled = np.clip(np.abs(vals) / s, None, None)
        codes = [codec.rtn_to_grid(float(v)) for v in vals / s]
        dq = np.array([codec.e2m1_decode(c) for c in codes]) * s
        return ((vals - dq) ** 2).sum()

    for i in range(2):
        for gidx in range(2):
            vals = x[i, gidx * 32 : (gidx + 1) * 32]
            e = int(q.scales[i, gidx])
            err = group_error(vals, e)
            for adj in (e - 1, e + 1):
                if 0 <= adj <= 254:
                    assert err <= group_error(vals, adj) + 1e-12


def test_quest_exhaustive_scale_search_oracle():
    # the chosen exponent is globally optimal over every representable scale
    # within the search span
    r = np.random.default_rng(7)
    x = r.normal(size=(1, 32))
    q, _ = quantizers.quantize_quest(x)
    vals = x[0]
    amax = np.abs(vals).max()

    best_err, best_e = None, None
    for e in range(254, -1, -1):
        s = codec.e8m0_decode(e)
        if amax / s > 96.0 or amax / s < 3.0:
            continue
        codes = [codec.rtn_to_grid(float(v / s)) for v in vals]
        dq = np.array([codec.e2m1_decode(c) for c in codes]) * s
        err = ((vals - dq) ** 2).sum()
        if best_err is None or err < best_err - 1e-15:
            best_err, best_e = err, e
    s = codec.e8m0_decode(int(q.scales[0, 0]))
    got_err = ((vals - codec.dequantize(q)[0]) ** 2).sum()
    assert got_err <= best_err + 1e-12


def test_quest_mask_semantics():
    # force clipping by shrinking the scale search toward small scales is not
    # possible directly; instead check the reported mask against |x/s| > 6
    r = np.random.default_rng(8)
    x = r.standard_t(df=1.5, size=(6, 64))  # heavy tails invite clipping
    q, mask = quantizers.quantize_quest(x)
    s = codec.e8m0_decode(q.scales.astype(int))
    per_elem = np.repeat(s, 32, axis=1)
    assert np.array_equal(mask, np.abs(x / per_elem) <= 6.0)
    assert (~mask).any()  # at least one clipped coordinate in heavy tails


def test_apply_scheme_dispatch():
    x = np.random.default_rng(9).normal(size=(2, 32))
    q, m = quantizers.apply_scheme(x, quantizers.RTN_ABSMAX)
    assert m.all()
    with pytest.raises(ValueError):
        quantizers.apply_scheme(x, quantizers.SR_ABSMAX)  # seed required
    q2, m2 = quantizers.apply_scheme(x, quantizers.QUEST)
    assert m2.dtype == bool


def test_mse_ordering_on_gaussian_data():
    mse = {k: gaussian_mse(k, dim=2048, samples=96, seed=0).value
           for k in ("rtn_absmax", "sr_absmax", "quest")}
    assert mse["quest"] <= mse["rtn_absmax"] < mse["sr_absmax"]


def test_mse_reference_windows():
    # centers from quantizer comparisons on Gaussian data; +-20%
    mse_rtn = gaussian_mse("rtn_absmax", dim=4096, samples=64, seed=1).value
    mse_sr = gaussian_mse("sr_absmax", dim=4096, samples=64, seed=1).value
    mse_quest = gaussian_mse("quest", dim=4096, samples=64, seed=1).value
    assert abs(mse_rtn - 1.37e-2) <= 0.2 * 1.37e-2
    assert abs(mse_sr - 2.77e-2) <= 0.2 * 2.77e-2
    assert abs(mse_quest - 1.32e-2) <= 0.2 * 1.32e-2


def test_nonfinite_rejected():
    x = np.full((1, 32), np.inf)
    for scheme in (quantizers.RTN_ABSMAX, quantizers.QUEST):
        with pytest.raises(ValueError):
            quantizers.apply_scheme(x, scheme, seed=0)
