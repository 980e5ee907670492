"""Command-line interface.

Every subcommand accepts --seed and --out, reads/writes files only (no
interactive mode), and is deterministic given the seed.  Exit codes:
0 success, 2 usage error, 3 I/O or parse error, 4 numeric failure
(divergence or a degenerate fit).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import __version__, codec, diagnostics, matio, quantizers, scaling, train
from ._backend import BACKEND
from .codec import FormatError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class NumericFailure(RuntimeError):
    pass


def _cmd_quantize(args) -> int:
    m = matio.read_matrix(args.infile)
    scheme = quantizers.QuantScheme(kind=args.scheme)
    q, mask = quantizers.apply_scheme(m, scheme, seed=args.seed)
    with open(args.out, "wb") as f:
        f.write(codec.serialize(q))
    if args.scheme == "quest":
        mask_path = args.mask or (args.out + ".mask")
        matio.write_mask(mask_path, mask)
    mse = float(((m - codec.dequantize(q)) ** 2).mean())
    print(f"rows={q.rows} cols={q.cols} mse={mse!r}")
    return EXIT_OK


def _cmd_dequantize(args) -> int:
    with open(args.infile, "rb") as f:
        q = codec.deserialize(f.read())
    matio.write_matrix(args.out, codec.dequantize(q), fmt=args.format)
    print(f"rows={q.rows} cols={q.cols}")
    return EXIT_OK


def _cmd_bench(args) -> int:
    rows: list[diagnostics.MetricRow] = []
    if args.metric == "mse":
        est = diagnostics.gaussian_mse(args.scheme, dim=args.dim, samples=args.samples,
                                       seed=args.seed)
        rows.append(diagnostics.MetricRow(args.scheme, "gaussian_mse", est.value, est.stderr,
                                          est.samples, args.seed))
    elif args.metric == "misalignment":
        est = diagnostics.misalignment(args.scheme, dim=args.dim, samples=args.samples,
                                       seed=args.seed)
        rows.append(diagnostics.MetricRow(args.scheme, "misalignment", est.value, est.stderr,
                                          est.samples, args.seed))
    elif args.metric == "depth-profile":
        pair = train.parse_pair(args.scheme) if ":" in args.scheme else train.SchemePair(
            args.scheme, "rtn")
        dims = train.DEFAULT_DIMS["teacher"]
        model = train.ToyModel(dims, seed=args.seed, pair=pair)
        x = train.make_task("teacher", seed=args.seed).batch(args.seed, 0, args.samples)[0]
        rep = diagnostics.gradient_depth_profile(model, x, pair, seed=args.seed)
        for layer, value in rep.cosine_by_depth:
            rows.append(diagnostics.MetricRow(rep.scheme, f"cosine_layer{layer}", value,
                                              0.0, rep.samples, args.seed))
        for layer, value in rep.misalignment_by_depth:
            rows.append(diagnostics.MetricRow(rep.scheme, f"misalignment_layer{layer}", value,
                                              0.0, rep.samples, args.seed))
    else:
        raise ValueError(f"unknown metric {args.metric!r}")
    diagnostics.write_metrics_csv(args.out, rows)
    for r in rows:
        print(f"{r.scheme} {r.metric} = {r.value!r} (stderr {r.stderr!r})")
    return EXIT_OK


_TRAIN_KEYS = {
    "task", "pair", "dims", "steps", "batch_size", "lr", "weight_decay",
    "grad_clip", "warmup_frac", "lr_floor", "seed", "eval_every",
}


def _train_config_from_file(path, seed_override: int | None):
    raw = matio.read_keyvalue_config(path)
    unknown = set(raw) - _TRAIN_KEYS - {"pairs", "ratios", "seeds"}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    task_name = raw.get("task", "teacher")
    pair = train.parse_pair(raw.get("pair", "quest:rtn"))
    dims = [int(v) for v in raw["dims"].split(",")] if "dims" in raw else None
    seed = seed_override if seed_override is not None else int(raw.get("seed", "0"))
    cfg = train.TrainConfig(
        steps=int(raw.get("steps", "400")),
        batch_size=int(raw.get("batch_size", "64")),
        lr=float(raw.get("lr", "0.02")),
        weight_decay=float(raw.get("weight_decay", "0.1")),
        grad_clip=float(raw.get("grad_clip", "1.0")),
        warmup_frac=float(raw.get("warmup_frac", "0.1")),
        lr_floor=float(raw.get("lr_floor", "0.0")),
        seed=seed,
        eval_every=int(raw.get("eval_every", "10")),
    )
    return raw, task_name, pair, dims, cfg


def _cmd_train(args) -> int:
    _, task_name, pair, dims, cfg = _train_config_from_file(args.config, args.seed)
    task = train.make_task(task_name, seed=cfg.seed)
    model = train.ToyModel(dims or train.DEFAULT_DIMS[task_name], seed=cfg.seed, pair=pair)
    result = train.train(model, task, cfg)
    with open(args.out, "w", newline="") as f:
        f.write(f"# status = {result.status}\n")
        f.write(f"# pair = {result.pair_label}\n")
        f.write(f"# final_loss = {result.final_loss!r}\n")
        w = csv.writer(f)
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in result.history:
            w.writerow([step, repr(loss), repr(lr)])
    print(f"status={result.status} final_loss={result.final_loss!r}")
    if result.status != "ok":
        raise NumericFailure("training diverged")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    raw, task_name, _, dims, cfg = _train_config_from_file(args.config, args.seed)
    pairs = [train.parse_pair(p) for p in raw.get("pairs", "quest:rtn,quest:sr").split(",")]
    ratios = [float(v) for v in raw.get("ratios", "1,4,16").split(",")]
    seeds = [int(v) for v in raw.get("seeds", "0,1,2").split(",")]
    cells = train.loss_gap_sweep(pairs, ratios, seeds, task_name=task_name, dims=dims, cfg=cfg)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["pair", "ratio", "seeds", "median_gap", "spread",
                    "median_quantized", "median_exact"])
        for c in cells:
            w.writerow([c.pair_label, repr(c.ratio), c.seeds, repr(c.median_gap),
                        repr(c.spread), repr(c.median_quantized), repr(c.median_exact)])
    print(f"wrote {len(cells)} cells")
    return EXIT_OK


def _cmd_fit(args) -> int:
    records = scaling.read_records_csv(args.records)
    if not records:
        raise ValueError("records file contains no rows")
    baseline = tuple(args.baseline.split(":"))
    if len(baseline) != 2:
        raise ValueError("--baseline must look like fp8:fp8")
    fixed = {}
    if args.form and args.form != "free":
        name, _, value = args.form.partition("=")
        fixed[name] = float(value)
    try:
        report = scaling.fit_stage1(records, delta=args.delta, fixed=fixed, baseline=baseline)
        quantized = [r for r in records if (r.p_fwd, r.p_bwd) != baseline]
        if quantized:
            report = scaling.fit_stage2(report.params, records, delta=args.delta,
                                        baseline=baseline)
    except ValueError as e:
        raise NumericFailure(str(e)) from None
    scaling.write_fit_json(args.out, report)
    print(f"objective={report.objective!r}")
    return EXIT_OK


def _parse_grid(text: str) -> np.ndarray:
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"grid must be lo:hi:count, got {text!r}")
    lo, hi, count = float(parts[0]), float(parts[1]), int(parts[2])
    if lo <= 0 or hi <= lo or count < 1:
        raise ValueError(f"bad grid {text!r}")
    return np.geomspace(lo, hi, count)


def _read_speedups_csv(path) -> scaling.SpeedupTable:
    entries = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            entries[(row["p_fwd"].strip(), row["p_bwd"].strip())] = (
                float(row["s_fwd"]), float(row["s_bwd"]))
    return scaling.SpeedupTable(entries=entries)


def _cmd_region(args) -> int:
    speedups = _read_speedups_csv(args.speedups) if args.speedups else scaling.REFERENCE_SPEEDUPS
    if args.params:
        with open(args.params) as f:
            blob = json.load(f)["params"]
        params = scaling.ScalingLawParams(
            A=blob["A"], alpha=blob["alpha"], B=blob["B"], beta=blob["beta"],
            gamma=blob["gamma"], E=blob["E"], eff_n=blob["eff_n"], eff_d=blob["eff_d"],
        )
    else:
        params = scaling.REFERENCE_COEFFS
    cells = scaling.optimal_region_grid(
        params, speedups, speedups.pairs(), _parse_grid(args.n_grid),
        _parse_grid(args.budget_grid),
    )
    provenance = []
    for pf, pb in speedups.pairs():
        sf, sb = speedups.get(pf, pb)
        st = scaling.training_speedup(sf, sb)
        provenance.append(f"speedup {pf}:{pb} s_fwd={sf} s_bwd={sb} s_train={st!r}")
    scaling.write_region_csv(args.out, cells, provenance=provenance)
    print(f"wrote {len(cells)} cells")
    return EXIT_OK


def _cmd_selftest(args) -> int:
    from . import selftest

    only = args.only.split(",") if args.only else None
    results = selftest.run_selftest(seed=args.seed, out_dir=args.out, only=only,
                                    verbose=True)
    if not all(r.passed for r in results):
        raise NumericFailure("one or more self-test criteria failed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mx4train",
        description="Simulated MXFP4 quantized-training toolkit "
                    f"(v{__version__}, kernel backend: {BACKEND})",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(func=fn)
        sp.add_argument("--seed", type=int, default=None)
        return sp

    sp = add("quantize", _cmd_quantize, "quantize a matrix file to an MXF4 container")
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--scheme", choices=quantizers.KINDS, default="rtn_absmax")
    sp.add_argument("--mask", default=None, help="mask sidecar path (quest only)")

    sp = add("dequantize", _cmd_dequantize, "decode an MXF4 container to a matrix file")
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--format", choices=["csv", "bin"], default="csv")

    sp = add("bench", _cmd_bench, "quantizer quality metrics")
    sp.add_argument("--metric", choices=["mse", "misalignment", "depth-profile"],
                    required=True)
    sp.add_argument("--scheme", default="rtn_absmax")
    sp.add_argument("--dim", type=int, default=4096)
    sp.add_argument("--samples", type=int, default=256)
    sp.add_argument("--out", required=True)

    sp = add("train", _cmd_train, "train the toy model from a config file")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)

    sp = add("sweep", _cmd_sweep, "loss-gap sweep over scheme pairs and data ratios")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)

    sp = add("fit", _cmd_fit, "fit the scaling law to run records")
    sp.add_argument("--records", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--delta", type=float, default=1e-4)
    sp.add_argument("--baseline", default="fp8:fp8")
    sp.add_argument("--form", default="free", help="'free' or '<param>=<value>'")

    sp = add("region", _cmd_region, "precision-optimality region grid")
    sp.add_argument("--out", required=True)
    sp.add_argument("--params", default=None, help="fit JSON (default: bundled reference)")
    sp.add_argument("--speedups", default=None, help="CSV p_fwd,p_bwd,s_fwd,s_bwd")
    sp.add_argument("--n-grid", default="1e7:1e11:24")
    sp.add_argument("--budget-grid", default="1e8:1e13:32")

    sp = add("selftest", _cmd_selftest, "run the acceptance suite")
    sp.add_argument("--out", required=True, help="report directory")
    sp.add_argument("--only", default=None, help="comma-separated criterion ids")

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is None and args.command != "train" and args.command != "sweep":
        args.seed = 0
    try:
        return args.func(args)
    except NumericFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
