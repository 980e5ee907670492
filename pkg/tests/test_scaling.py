import dataclasses
import math

import numpy as np
import pytest

from mx4train import scaling


def small_params():
    return scaling.REFERENCE_COEFFS


def test_params_validation():
    with pytest.raises(ValueError):
        scaling.ScalingLawParams(A=-1, alpha=0.5, B=1, beta=0.5, gamma=0.3, E=1)
    with pytest.raises(ValueError):
        scaling.ScalingLawParams(A=1, alpha=0.5, B=1, beta=0.5, gamma=0.3, E=1,
                                 eff_n={"fp4": 1.5})


def test_eval_loss_identity_efficiencies_recover_base_law():
    p = small_params()
    n, d = 5e7, 2e9
    inner = p.A / n**p.alpha + p.B / d**p.beta
    expect = inner**p.gamma + p.E
    assert abs(scaling.eval_loss(p, n, d, "fp8", "fp8") - expect) / expect < 1e-12


def test_eval_loss_independent_symbolic_oracle():
    # recompute through logs with mpmath-free arbitrary formula arrangement
    p = small_params()
    n, d = 3e7, 3e9
    got = scaling.eval_loss(p, n, d, "fp8", "fp8")
    inner = math.exp(math.log(p.A) - p.alpha * math.log(n)) + math.exp(
        math.log(p.B) - p.beta * math.log(d))
    expect = math.exp(p.gamma * math.log(inner)) + p.E
    assert abs(got - expect) <= 1e-12 * expect


def test_eval_loss_efficiency_scaling():
    p = small_params()
    base = scaling.eval_loss(p, 1e8, 1e10, "fp8", "fp8")
    quant = scaling.eval_loss(p, 1e8, 1e10, "fp4", "fp4")
    # fp4 efficiencies shrink the effective budget, raising the loss
    assert quant > base
    equivalent = scaling.eval_loss(p, 1e8 * p.eff_n["fp4"], 1e10 * p.eff_d["fp4"],
                                   "fp8", "fp8")
    assert abs(quant - equivalent) < 1e-12


def test_eval_loss_monotone():
    p = small_params()
    ns = np.geomspace(1e6, 1e12, 20)
    ds = np.geomspace(1e7, 1e13, 20)
    grid = np.array([[scaling.eval_loss(p, n, d, "fp8", "fp8") for d in ds] for n in ns])
    assert np.all(np.diff(grid, axis=0) < 0)
    assert np.all(np.diff(grid, axis=1) < 0)


def test_eval_loss_unknown_precision():
    with pytest.raises(KeyError):
        scaling.eval_loss(small_params(), 1e8, 1e10, "fp2", "fp8")


def test_training_speedup_exact_rows():
    assert scaling.training_speedup(2.0, 1.0) == 1.2
    assert scaling.training_speedup(1.0, 2.0) == 1.5
    assert scaling.training_speedup(2.0, 2.0) == 2.0


def test_training_speedup_between_operands():
    r = np.random.default_rng(0)
    for _ in range(100):
        sf, sb = r.uniform(0.2, 5.0, size=2)
        st = scaling.training_speedup(sf, sb)
        assert min(sf, sb) - 1e-12 <= st <= max(sf, sb) + 1e-12
    assert scaling.training_speedup(1.7, 1.7) == pytest.approx(1.7, abs=1e-15)
    with pytest.raises(ValueError):
        scaling.training_speedup(0.0, 1.0)


def test_effective_loss_baseline_reduces_to_eval():
    p = small_params()
    sp = scaling.REFERENCE_SPEEDUPS
    assert scaling.effective_loss(p, sp, 1e8, 1e10, "fp8", "fp8") == pytest.approx(
        scaling.eval_loss(p, 1e8, 1e10, "fp8", "fp8"), rel=1e-15)


def test_effective_loss_budget_structure():
    # doubling s_fwd at fixed s_tr doubles effective N and halves effective D
    p = small_params()
    entries = {
        ("fp8", "fp8"): (1.0, 1.0),
        ("a", "a"): (1.0, 1.0),
        ("b", "b"): (2.0, 0.8),
    }
    # pick s_bwd for pair b so that s_tr matches pair a exactly
    # s_tr(a) = 1; solve 3*2*sb/(sb+4) = 1 -> sb = 0.8
    sp = scaling.SpeedupTable(entries=entries)
    assert scaling.training_speedup(2.0, 0.8) == pytest.approx(1.0, rel=1e-12)
    p2 = dataclasses.replace(p, eff_n={**p.eff_n, "a": 1.0, "b": 1.0},
                             eff_d={**p.eff_d, "a": 1.0, "b": 1.0})
    la = scaling.effective_loss(p2, sp, 1e8, 1e10, "a", "a")
    lb = scaling.effective_loss(p2, sp, 1e8, 1e10, "b", "b")
    expect = scaling.eval_loss(p2, 2e8, 0.5e10, "fp8", "fp8")
    assert lb == pytest.approx(expect, rel=1e-12)
    assert la == pytest.approx(scaling.eval_loss(p2, 1e8, 1e10, "fp8", "fp8"), rel=1e-12)


def test_region_single_precision_set():
    p = small_params()
    cells = scaling.optimal_region_grid(p, scaling.REFERENCE_SPEEDUPS,
                                        [("fp8", "fp8")], [1e7, 1e8], [1e9, 1e10])
    assert all(c.p_fwd == "fp8" and c.p_bwd == "fp8" for c in cells)
    assert len(cells) == 4


def test_region_all_efficiencies_one_fastest_wins():
    # with unit efficiencies, a pair whose speedups dominate on both the
    # effective-N and effective-D axes wins every cell
    p = dataclasses.replace(small_params(), eff_n={"fp8": 1.0, "fp4": 1.0},
                            eff_d={"fp8": 1.0, "fp4": 1.0})
    sp = scaling.SpeedupTable(entries={("fp8", "fp8"): (1.0, 1.0),
                                       ("fp4", "fp4"): (2.0, 4.0)})
    cells = scaling.optimal_region_grid(
        p, sp, sp.pairs(), np.geomspace(1e7, 1e10, 5), np.geomspace(1e8, 1e12, 5))
    assert all(c.p_fwd == "fp4" and c.p_bwd == "fp4" for c in cells)


def test_region_boundary_monotone_in_budget():
    # each row flips from fp8-optimal to fp4-optimal exactly once: the fp4
    # pair trades effective data for effective parameters, so it wins once
    # the budget is data-rich enough
    p = small_params()
    cells = scaling.optimal_region_grid(
        p, scaling.REFERENCE_SPEEDUPS,
        [("fp8", "fp8"), ("fp4", "fp4")],
        np.geomspace(1e7, 1e10, 8), np.geomspace(1e8, 1e13, 24))
    by_n: dict[float, list] = {}
    for c in cells:
        by_n.setdefault(c.n_max, []).append(c)
    saw_both = 0
    for row in by_n.values():
        row.sort(key=lambda c: c.budget)
        labels = [c.p_fwd for c in row]
        transitions = sum(1 for a, b in zip(labels, labels[1:]) if a != b)
        assert transitions <= 1
        if transitions == 1:
            assert labels[0] == "fp8" and labels[-1] == "fp4"
            saw_both += 1
    assert saw_both >= 3  # the boundary actually crosses the grid


def test_region_argmin_invariant_under_common_rescale():
    p = small_params()
    c = 3.7
    scaled = dataclasses.replace(p, A=p.A * c, B=p.B * c, E=p.E * c**p.gamma)
    grids = (np.geomspace(1e7, 1e9, 4), np.geomspace(1e8, 1e12, 6))
    base_cells = scaling.optimal_region_grid(
        p, scaling.REFERENCE_SPEEDUPS, scaling.REFERENCE_SPEEDUPS.pairs(), *grids)
    scaled_cells = scaling.optimal_region_grid(
        scaled, scaling.REFERENCE_SPEEDUPS, scaling.REFERENCE_SPEEDUPS.pairs(), *grids)
    for a, b in zip(base_cells, scaled_cells):
        assert (a.p_fwd, a.p_bwd) == (b.p_fwd, b.p_bwd)


def test_speedup_table_validation():
    with pytest.raises(ValueError):
        scaling.SpeedupTable(entries={("fp8", "fp8"): (2.0, 1.0)})
    with pytest.raises(ValueError):
        scaling.SpeedupTable(entries={("fp4", "fp4"): (1.0, 1.0)},
                             baseline=("fp8", "fp8"))


def _records(params, n_vals=(3e7, 5e7, 1e8, 2e8),
             ratios=(25, 50, 100, 200, 400, 800), p=("fp8", "fp8")):
    return [
        scaling.RunRecord(n=n, d=n * r, p_fwd=p[0], p_bwd=p[1],
                          loss=scaling.eval_loss(params, n, n * r, p[0], p[1]))
        for n in n_vals for r in ratios
    ]


def test_fit_requires_enough_records():
    p = small_params()
    with pytest.raises(ValueError):
        scaling.fit_stage1(_records(p)[:4])


def test_fit_stage1_recovers_fixed_form():
    # planted data with gamma pinned; fitting under the same constraint
    # recovers the remaining parameters
    truth = scaling.ScalingLawParams(A=400.0, alpha=0.5, B=900.0, beta=0.45,
                                     gamma=1.0, E=1.7,
                                     eff_n={"fp8": 1.0}, eff_d={"fp8": 1.0})
    rep = scaling.fit_stage1(_records(truth), fixed={"gamma": 1.0})
    for name in ("A", "alpha", "B", "beta", "E"):
        assert abs(math.log(getattr(rep.params, name) / getattr(truth, name))) < 0.02
    assert rep.params.gamma == 1.0


def test_fit_alternative_forms_report():
    truth = small_params()  # gamma = 0.274, far from 1
    reps = scaling.fit_alternative_forms(_records(truth), forms=("free", "gamma=1"))
    assert reps[0].form == "free" and reps[1].form == "gamma=1"
    assert reps[1].objective > reps[0].objective
    assert reps[1].params.gamma == 1.0


def test_fit_huber_more_robust_than_squared():
    truth = scaling.ScalingLawParams(A=500.0, alpha=0.52, B=1200.0, beta=0.48,
                                     gamma=1.0, E=1.5,
                                     eff_n={"fp8": 1.0}, eff_d={"fp8": 1.0})
    clean = _records(truth, ratios=(25, 100, 400))
    spoiled = list(clean)
    spoiled[3] = dataclasses.replace(spoiled[3], loss=spoiled[3].loss * 1.5)
    fixed = {"gamma": 1.0}
    huber = scaling.fit_stage1(spoiled, delta=1e-4, fixed=fixed)
    squared = scaling.fit_stage1(spoiled, delta=1e6, fixed=fixed)
    shift_h = abs(math.log(huber.params.alpha / truth.alpha))
    shift_s = abs(math.log(squared.params.alpha / truth.alpha))
    assert shift_h < shift_s / 5.0


def test_fit_stage2_baseline_records_give_unit_efficiency():
    p = small_params()
    base = dataclasses.replace(p, eff_n={"fp8": 1.0}, eff_d={"fp8": 1.0})
    recs = _records(p, ratios=(25, 100, 400))
    rep = scaling.fit_stage2(base, recs)
    assert rep.params.eff_n["fp8"] == 1.0
    assert rep.params.eff_d["fp8"] == 1.0


def test_fit_stage2_forward_only_asymmetry():
    p = small_params()
    planted = dataclasses.replace(p, eff_n={"fp8": 1.0, "fp4": 0.7},
                                  eff_d={"fp8": 1.0, "fp4": 1.0})
    recs = _records(planted, ratios=(25, 100, 400), p=("fp4", "fp8"))
    base = dataclasses.replace(p, eff_n={"fp8": 1.0}, eff_d={"fp8": 1.0})
    rep = scaling.fit_stage2(base, recs)
    assert abs(math.log(rep.params.eff_n["fp4"] / 0.7)) < 0.02
    assert "fp4" not in rep.params.eff_d  # nothing to fit on the backward side


def test_records_csv_roundtrip(tmp_path):
    p = small_params()
    recs = _records(p, ratios=(25, 100))
    path = tmp_path / "records.csv"
    scaling.write_records_csv(path, recs)
    back = scaling.read_records_csv(path)
    assert back == recs


def test_records_csv_bad_rows(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("n,d,p_fwd,p_bwd,loss\n1e7,1e9,fp8,fp8,notanumber\n")
    with pytest.raises(ValueError, match="line 2"):
        scaling.read_records_csv(path)
    path.write_text("n,d\n1,2\n")
    with pytest.raises(ValueError, match="columns"):
        scaling.read_records_csv(path)


def test_fit_determinism():
    p = small_params()
    recs = _records(p, ratios=(25, 100, 400))
    r1 = scaling.fit_stage1(recs, fixed={"gamma": 0.274})
    r2 = scaling.fit_stage1(recs, fixed={"gamma": 0.274})
    assert all(getattr(r1.params, k) == getattr(r2.params, k)
               for k in scaling.FIT_PARAM_NAMES)
