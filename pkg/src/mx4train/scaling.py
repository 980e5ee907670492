"""Precision-aware scaling-law toolkit.

The loss law is L(N, D, P_fwd, P_bwd) =
(A / (N * eff_n(P_fwd))^alpha + B / (D * eff_d(P_bwd))^beta)^gamma + E,
where eff_n and eff_d in (0, 1] model the parameter- and data-efficiency
cost of quantizing the forward and backward passes.  Fitting happens in two
stages on a Huber objective over log-losses: stage 1 fits the six base
constants on baseline-precision runs, stage 2 freezes them and fits only
the per-precision efficiencies.  A bit-operations speedup model turns the
law into effective losses at a fixed compute budget and into "which
precision pair is optimal where" region grids.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

FIT_PARAM_NAMES = ("A", "alpha", "B", "beta", "gamma", "E")


@dataclass(frozen=True)
class ScalingLawParams:
    A: float
    alpha: float
    B: float
    beta: float
    gamma: float
    E: float
    eff_n: dict[str, float] = field(default_factory=dict)
    eff_d: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name in FIT_PARAM_NAMES:
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and positive, got {v}")
        for label, eff in (("eff_n", self.eff_n), ("eff_d", self.eff_d)):
            for k, v in eff.items():
                if not (0.0 < v <= 1.0):
                    raise ValueError(f"{label}[{k!r}] = {v} outside (0, 1]")


@dataclass(frozen=True)
class RunRecord:
    """One training-run observation."""

    n: float
    d: float
    p_fwd: str
    p_bwd: str
    loss: float

    def __post_init__(self):
        if self.n <= 0 or self.d <= 0:
            raise ValueError("n and d must be positive")


@dataclass(frozen=True)
class SpeedupTable:
    """Forward/backward speedups per precision pair, relative to a baseline."""

    entries: dict[tuple[str, str], tuple[float, float]]
    baseline: tuple[str, str] = ("fp8", "fp8")

    def __post_init__(self):
        if self.baseline not in self.entries:
            raise ValueError("baseline pair missing from table")
        if self.entries[self.baseline] != (1.0, 1.0):
            raise ValueError("baseline pair must map to (1.0, 1.0)")
        for pair, (sf, sb) in self.entries.items():
            if sf <= 0 or sb <= 0:
                raise ValueError(f"non-positive speedup for {pair}")

    def get(self, p_fwd: str, p_bwd: str) -> tuple[float, float]:
        try:
            return self.entries[(p_fwd, p_bwd)]
        except KeyError:
            raise KeyError(f"no speedup entry for {(p_fwd, p_bwd)}") from None

    def pairs(self) -> list[tuple[str, str]]:
        return sorted(self.entries)


# Reference values bundled for the CLI defaults: FP8-baseline law constants
# from a fit over unquantized runs, bit-ops speedups, and the measured
# forward/backward efficiencies of the quest/rtn quantizers.
REFERENCE_COEFFS = ScalingLawParams(
    A=1.52e5, alpha=0.589, B=5.25e5, beta=0.544, gamma=0.274, E=1.35,
    eff_n={"fp8": 1.0, "fp4": 0.64},
    eff_d={"fp8": 1.0, "fp4": 0.93},
)

REFERENCE_SPEEDUPS = SpeedupTable(
    entries={
        ("fp8", "fp8"): (1.0, 1.0),
        ("fp4", "fp8"): (2.0, 1.0),
        ("fp8", "fp4"): (1.0, 2.0),
        ("fp4", "fp4"): (2.0, 2.0),
    }
)


def eval_loss(params: ScalingLawParams, n, d, p_fwd: str, p_bwd: str):
    """The loss law at (n, d) for the given precision ids; broadcasts."""
    if p_fwd not in params.eff_n:
        raise KeyError(f"unknown forward precision id {p_fwd!r}")
    if p_bwd not in params.eff_d:
        raise KeyError(f"unknown backward precision id {p_bwd!r}")
    n = np.asarray(n, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if np.any(n <= 0) or np.any(d <= 0):
        raise ValueError("n and d must be positive")
    ln_n = np.log(n * params.eff_n[p_fwd])
    ln_d = np.log(d * params.eff_d[p_bwd])
    inner = np.exp(math.log(params.A) - params.alpha * ln_n) + np.exp(
        math.log(params.B) - params.beta * ln_d
    )
    out = np.exp(params.gamma * np.log(inner)) + params.E
    return float(out) if out.ndim == 0 else out


def training_speedup(s_fwd: float, s_bwd: float) -> float:
    """Weighted harmonic mean: 1/3 of training time is forward, 2/3 backward.

    Evaluated as 3*s_fwd*s_bwd / (s_bwd + 2*s_fwd), which is the same mean
    with a single rounding step.
    """
    if s_fwd <= 0 or s_bwd <= 0:
        raise ValueError("speedups must be positive")
    return 3.0 * s_fwd * s_bwd / (s_bwd + 2.0 * s_fwd)


def effective_loss(
    params: ScalingLawParams,
    speedups: SpeedupTable,
    n_max: float,
    d_max: float,
    p_fwd: str,
    p_bwd: str,
) -> float:
    """Loss at speedup-adjusted budgets.

    A faster forward buys a bigger trainable model (n_max * s_fwd) and a
    faster training step buys more data per unit model (d_max * s_tr/s_fwd).
    """
    s_fwd, s_bwd = speedups.get(p_fwd, p_bwd)
    s_tr = training_speedup(s_fwd, s_bwd)
    return float(eval_loss(params, n_max * s_fwd, d_max * s_tr / s_fwd, p_fwd, p_bwd))


def _bits_of(precision_id: str) -> int:
    m = re.search(r"(\d+)", precision_id)
    return int(m.group(1)) if m else 10**6


@dataclass(frozen=True)
class RegionCell:
    n_max: float
    budget: float
    p_fwd: str
    p_bwd: str
    loss: float


def optimal_region_grid(
    params: ScalingLawParams,
    speedups: SpeedupTable,
    precisions: list[tuple[str, str]],
    n_grid,
    budget_grid,
) -> list[RegionCell]:
    """argmin-precision pair per (n_max, budget) cell.

    Ties break toward the lower total bit-width, then lexicographically.
    """
    if not precisions:
        raise ValueError("empty precision set")
    order = sorted(precisions, key=lambda p: (_bits_of(p[0]) + _bits_of(p[1]), p))
    cells = []
    for n_max in np.asarray(n_grid, dtype=np.float64):
        for budget in np.asarray(budget_grid, dtype=np.float64):
            best = None
            for pf, pb in order:
                loss = effective_loss(params, speedups, float(n_max), float(budget), pf, pb)
                if best is None or loss < best[0]:
                    best = (loss, pf, pb)
            cells.append(RegionCell(float(n_max), float(budget), best[1], best[2], best[0]))
    return cells


# ---------------------------------------------------------------------------
# fitting


@dataclass
class FitReport:
    params: ScalingLawParams
    objective: float
    residuals: np.ndarray
    form: str = "free"
    fixed: dict[str, float] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "form": self.form,
            "fixed": self.fixed,
            "objective": self.objective,
            "params": {
                **{k: getattr(self.params, k) for k in FIT_PARAM_NAMES},
                "eff_n": self.params.eff_n,
                "eff_d": self.params.eff_d,
            },
            "residuals": [float(r) for r in self.residuals],
        }


def _huber(r: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


def _predict_log_loss(theta: np.ndarray, ln_n, ln_d):
    ln_a, alpha, ln_b, beta, gamma, ln_e = theta
    with np.errstate(over="ignore"):
        inner = np.exp(ln_a - alpha * ln_n) + np.exp(ln_b - beta * ln_d)
        pred = np.exp(gamma * np.log(inner)) + math.exp(ln_e)
    return np.log(pred)


_THETA_NAMES = ("A", "alpha", "B", "beta", "gamma", "E")
_LOG_SCALE = ("A", "B", "E")  # stored as logs inside theta


def _theta_to_params(theta: np.ndarray) -> dict[str, float]:
    vals = {}
    for i, name in enumerate(_THETA_NAMES):
        vals[name] = math.exp(theta[i]) if name in _LOG_SCALE else theta[i]
    return vals


def _params_to_theta(vals: dict[str, float]) -> np.ndarray:
    return np.array(
        [math.log(vals[n]) if n in _LOG_SCALE else vals[n] for n in _THETA_NAMES]
    )


def fit_stage1(
    records: list[RunRecord],
    delta: float = 1e-4,
    fixed: dict[str, float] | None = None,
    baseline: tuple[str, str] = ("fp8", "fp8"),
) -> FitReport:
    """Fit (A, alpha, B, beta, gamma, E) on baseline-precision records.

    Minimizes sum of Huber_delta(log L_pred - log L_obs) with a Nelder-Mead
    simplex from a deterministic multi-start grid (3 values per free
    parameter around data-driven centers); A, B, E move in log-space.
    fixed pins named parameters (e.g. {"gamma": 1.0}) for alternative forms.
    """
    fixed = dict(fixed or {})
    recs = [r for r in records if (r.p_fwd, r.p_bwd) == baseline] or list(records)
    if len(recs) < 6:
        raise ValueError(f"need at least 6 records, got {len(recs)}")
    ln_n = np.array([math.log(r.n) for r in recs])
    ln_d = np.array([math.log(r.d) for r in recs])
    log_l = np.array([math.log(r.loss) for r in recs])
    if len(set(ln_n)) < 2 or len(set(ln_d)) < 2:
        raise ValueError("records must span multiple n and d values")

    free_idx = [i for i, n in enumerate(_THETA_NAMES) if n not in fixed]
    fixed_theta = _params_to_theta({**{n: 1.0 for n in _THETA_NAMES}, **fixed})

    def objective(free_vals: np.ndarray) -> float:
        theta = fixed_theta.copy()
        theta[free_idx] = free_vals
        if np.any(np.abs(theta) > 60):
            return 1e30
        pred = _predict_log_loss(theta, ln_n, ln_d)
        if not np.all(np.isfinite(pred)):
            return 1e30
        return float(_huber(pred - log_l, delta).sum())

    l_min, l_med = float(np.min(np.exp(log_l))), float(np.median(np.exp(log_l)))
    n_med, d_med = float(np.exp(np.median(ln_n))), float(np.exp(np.median(ln_d)))
    e_centers = [l_min * f for f in (0.25, 0.5, 0.8)] if "E" not in fixed else [fixed["E"]]
    a_exp_centers = [0.35, 0.5, 0.7] if "alpha" not in fixed else [fixed["alpha"]]
    b_exp_centers = [0.35, 0.5, 0.7] if "beta" not in fixed else [fixed["beta"]]
    g_centers = [0.15, 0.3, 0.6] if "gamma" not in fixed else [fixed["gamma"]]
    coef_mults = [0.25, 1.0, 4.0]

    starts: list[np.ndarray] = []
    for e0 in e_centers:
        for al0 in a_exp_centers:
            for be0 in b_exp_centers:
                for ga0 in g_centers:
                    # split the inner sum evenly between both terms at the median point
                    s_mid = max(l_med - e0, 1e-9) ** (1.0 / ga0)
                    a_base = 0.5 * s_mid * n_med**al0
                    b_base = 0.5 * s_mid * d_med**be0
                    for am in coef_mults if "A" not in fixed else [1.0]:
                        for bm in coef_mults if "B" not in fixed else [1.0]:
                            vals = {
                                "A": a_base * am, "alpha": al0,
                                "B": b_base * bm, "beta": be0,
                                "gamma": ga0, "E": e0,
                            }
                            vals.update(fixed)
                            starts.append(_params_to_theta(vals)[free_idx])

    # short exploration over the whole grid, then polish the best few;
    # scan order is fixed, so the result is deterministic
    explored: list[tuple[float, int, np.ndarray]] = []
    for i, x0 in enumerate(starts):
        res = minimize(
            objective, x0, method="Nelder-Mead",
            options={"maxiter": 350, "xatol": 1e-8, "fatol": 1e-11},
        )
        explored.append((float(res.fun), i, res.x.copy()))
        if res.fun < 1e-18:
            break
    explored.sort(key=lambda t: (t[0], t[1]))
    best: tuple[float, int, np.ndarray] | None = None
    for fun, i, x in explored[:3]:
        res = minimize(
            objective, x, method="Nelder-Mead",
            options={"maxiter": 8000, "xatol": 1e-12, "fatol": 1e-16},
        )
        cand = (float(res.fun), i, res.x.copy()) if res.fun < fun else (fun, i, x)
        if best is None or cand[0] < best[0]:
            best = cand

    theta = fixed_theta.copy()
    theta[free_idx] = best[2]
    vals = _theta_to_params(theta)
    params = ScalingLawParams(
        **vals, eff_n={baseline[0]: 1.0}, eff_d={baseline[1]: 1.0}
    )
    residuals = _predict_log_loss(theta, ln_n, ln_d) - log_l
    return FitReport(params=params, objective=best[0], residuals=residuals, fixed=fixed)


def _sigmoid(t: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-t))


def fit_stage2(
    base: ScalingLawParams,
    records: list[RunRecord],
    delta: float = 1e-4,
    baseline: tuple[str, str] = ("fp8", "fp8"),
) -> FitReport:
    """Fit per-precision efficiencies with the stage-1 constants frozen.

    Every non-baseline forward precision id gets an eff_n entry and every
    non-baseline backward id an eff_d entry; all records are fitted jointly
    under the same Huber objective, with efficiencies squashed into (0, 1)
    through a logistic map.
    """
    if not records:
        raise ValueError("no records")
    fwd_ids = sorted({r.p_fwd for r in records} - {baseline[0]})
    bwd_ids = sorted({r.p_bwd for r in records} - {baseline[1]})
    k = len(fwd_ids) + len(bwd_ids)
    if k == 0:
        # nothing to fit: all records at baseline precision
        params = replace(base, eff_n={baseline[0]: 1.0}, eff_d={baseline[1]: 1.0})
        ln = np.array([math.log(r.loss) for r in records])
        pred = np.array(
            [math.log(eval_loss(params, r.n, r.d, r.p_fwd, r.p_bwd)) for r in records]
        )
        return FitReport(params=params, objective=float(_huber(pred - ln, delta).sum()),
                         residuals=pred - ln, form="stage2")

    ln_n = np.array([math.log(r.n) for r in records])
    ln_d = np.array([math.log(r.d) for r in records])
    log_l = np.array([math.log(r.loss) for r in records])
    fwd_pos = np.array([fwd_ids.index(r.p_fwd) if r.p_fwd in fwd_ids else -1 for r in records])
    bwd_pos = np.array([bwd_ids.index(r.p_bwd) if r.p_bwd in bwd_ids else -1 for r in records])
    theta1 = _params_to_theta({n: getattr(base, n) for n in _THETA_NAMES})

    fwd_gather = np.where(fwd_pos >= 0, fwd_pos, 0).clip(0, k - 1)
    bwd_gather = np.where(bwd_pos >= 0, len(fwd_ids) + bwd_pos, 0).clip(0, k - 1)

    def objective(t: np.ndarray) -> float:
        eff = _sigmoid(t)
        eff_f = np.where(fwd_pos >= 0, eff[fwd_gather], 1.0)
        eff_b = np.where(bwd_pos >= 0, eff[bwd_gather], 1.0)
        pred = _predict_log_loss(theta1, ln_n + np.log(eff_f), ln_d + np.log(eff_b))
        if not np.all(np.isfinite(pred)):
            return 1e30
        return float(_huber(pred - log_l, delta).sum())

    centers = [math.log(c / (1 - c)) for c in (0.3, 0.7, 0.95)]
    grids = np.array(np.meshgrid(*[centers] * k)).reshape(k, -1).T
    best = None
    for x0 in grids:
        res = minimize(objective, x0, method="Nelder-Mead",
                       options={"maxiter": 4000, "xatol": 1e-10, "fatol": 1e-14})
        if best is None or res.fun < best[0]:
            best = (float(res.fun), res.x.copy())
    res = minimize(objective, best[1], method="Nelder-Mead",
                   options={"maxiter": 8000, "xatol": 1e-13, "fatol": 1e-16})
    if res.fun < best[0]:
        best = (float(res.fun), res.x.copy())

    eff = _sigmoid(best[1])
    eff_n = {baseline[0]: 1.0}
    eff_d = {baseline[1]: 1.0}
    for i, pid in enumerate(fwd_ids):
        eff_n[pid] = float(eff[i])
    for j, pid in enumerate(bwd_ids):
        eff_d[pid] = float(eff[len(fwd_ids) + j])
    params = replace(base, eff_n=eff_n, eff_d=eff_d)
    pred = np.array([math.log(eval_loss(params, r.n, r.d, r.p_fwd, r.p_bwd)) for r in records])
    return FitReport(params=params, objective=best[0], residuals=pred - log_l, form="stage2")


def fit_alternative_forms(
    records: list[RunRecord],
    forms: tuple[str, ...] = ("free", "gamma=1", "beta=1"),
    delta: float = 1e-4,
) -> list[FitReport]:
    """Stage-1 fits under fixed-parameter constraints, for comparison."""
    out = []
    for form in forms:
        if form == "free":
            fixed = {}
        else:
            name, _, value = form.partition("=")
            if name not in _THETA_NAMES or not value:
                raise ValueError(f"bad form {form!r}; use 'free' or '<param>=<value>'")
            fixed = {name: float(value)}
        rep = fit_stage1(records, delta=delta, fixed=fixed)
        rep.form = form
        out.append(rep)
    return out


# ---------------------------------------------------------------------------
# file formats


def read_records_csv(path) -> list[RunRecord]:
    """CSV with header n,d,p_fwd,p_bwd,loss; n is the non-embedding parameter
    count and d the token count."""
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        required = {"n", "d", "p_fwd", "p_bwd", "loss"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"records CSV must have columns {sorted(required)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                out.append(
                    RunRecord(
                        n=float(row["n"]), d=float(row["d"]),
                        p_fwd=row["p_fwd"].strip(), p_bwd=row["p_bwd"].strip(),
                        loss=float(row["loss"]),
                    )
                )
            except (TypeError, ValueError) as e:
                raise ValueError(f"bad record at line {lineno}: {e}") from None
    return out


def write_records_csv(path, records: list[RunRecord]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["n", "d", "p_fwd", "p_bwd", "loss"])
        for r in records:
            w.writerow([repr(r.n), repr(r.d), r.p_fwd, r.p_bwd, repr(r.loss)])


def write_region_csv(path, cells: list[RegionCell], provenance: list[str] | None = None):
    with open(path, "w", newline="") as f:
        for line in provenance or []:
            f.write(f"# {line}\n")
        w = csv.writer(f)
        w.writerow(["n_max", "budget", "best_p_fwd", "best_p_bwd", "loss"])
        for c in cells:
            w.writerow([repr(c.n_max), repr(c.budget), c.p_fwd, c.p_bwd, repr(c.loss)])


def write_fit_json(path, report: FitReport):
    with open(path, "w") as f:
        json.dump(report.to_json_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
