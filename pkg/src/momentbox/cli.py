"""Command line interface.

Subcommands: ``test`` (one decision on a CSV dataset), ``region``
(grid inversion to a confidence region), ``montecarlo`` (coverage or
excess-length experiment on the built-in designs), ``simulate-z``
(limit-law draws from plug-in parameters), ``pretest`` (contact-set and
Hessian report), ``hist`` (scaled-statistic histograms).  All outputs are
UTF-8 CSV/JSON; report paths also render PNG figures next to the delimited
output unless ``--no-plot`` is given.  Exit code 0 on success, 2 on input
errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import designs, plotting
from .engine import EngineInputError, EngineSizeError, ks_statistic
from .harness import (ci_upper_endpoint, coverage_experiment, decide_method,
                      excess_length_experiment, local_power_curve,
                      scaled_histogram)
from .limitsim import (ContactPointParams, ParameterError, ZSimConfig,
                       simulate_Z, z_quantile)
from .models import (Aggregator, IntervalMeanModel, IntervalMedianModel,
                     ModelError, load_interval_csv)
from .pretest import PretestPlan, pretest_report_json, run_pretest
from .resampling import PlanError, RatePlan

INPUT_ERRORS = (ModelError, PlanError, EngineInputError, EngineSizeError,
                ParameterError, ValueError, OSError, json.JSONDecodeError)


def _parse_theta(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ModelError(f"cannot parse theta {text!r}; expected comma floats")


def _load(args):
    x_cols = args.x_cols.split(",") if args.x_cols else ["x"]
    data = load_interval_csv(args.data, x_cols, args.wl_col, args.wh_col)
    if args.model == "mean":
        model = IntervalMeanModel(d=data.d)
    else:
        model = IntervalMedianModel(d=data.d)
    return data, model


def _write_json(path, payload: str):
    if path:
        Path(path).write_text(payload, encoding="utf-8")
    else:
        print(payload)


def cmd_test(args) -> int:
    data, model = _load(args)
    theta = _parse_theta(args.theta)
    res = decide_method(args.method, model, data, theta, Aggregator(),
                        args.alpha, rate_plan=RatePlan(), draws=args.draws,
                        seed=args.seed)
    _write_json(args.out, res.to_json())
    return 0


def cmd_region(args) -> int:
    data, model = _load(args)
    lo, hi, mesh = args.grid
    fixed = dict(args.fix or [])
    k = model.n_params
    free = [i for i in range(k) if f"theta{i + 1}" not in fixed]
    if len(free) not in (1, 2):
        raise ModelError("region scans one or two free parameters; "
                         "fix the rest with --fix thetaK=value")
    axis = np.round(np.arange(lo, hi + mesh / 2, mesh), 12)
    grids = np.meshgrid(*([axis] * len(free)), indexing="ij")
    combos = np.column_stack([g.ravel() for g in grids])
    s = Aggregator()
    rows = []
    for combo in combos:
        theta = np.empty(k)
        for i in range(k):
            name = f"theta{i + 1}"
            theta[i] = fixed[name] if name in fixed else combo[free.index(i)]
        res = decide_method(args.method, model, data, theta, s, args.alpha,
                            draws=args.draws, seed=args.seed)
        rows.append([*theta.tolist(), res.stat, res.critical_value,
                     int(res.reject)])
    out = args.out or "region.csv"
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"theta{i + 1}" for i in range(k)]
                   + ["stat", "critical_value", "reject"])
        w.writerows(rows)
    accepted = [r for r in rows if not r[-1]]
    print(f"wrote {out}: {len(accepted)}/{len(rows)} grid points accepted")
    return 0


def cmd_montecarlo(args) -> int:
    methods = args.methods.split(",")
    if args.experiment == "coverage":
        report = coverage_experiment(args.design, args.n, methods, args.alpha,
                                     args.reps, args.seed, draws=args.draws)
    else:
        report = excess_length_experiment(args.design, args.n, methods,
                                          args.alpha[0], args.reps, args.seed,
                                          draws=args.draws)
    out = Path(args.out)
    out.write_text(report.to_json(), encoding="utf-8")
    csv_path = out.with_suffix(".csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(report.csv_rows())
    if not args.no_plot:
        fig_path = out.with_suffix(".png")
        if args.experiment == "coverage":
            plotting.coverage_figure(report, fig_path)
        else:
            plotting.excess_figure(report, fig_path)
        print(f"wrote {out}, {csv_path}, {fig_path}")
    else:
        print(f"wrote {out}, {csv_path}")
    return 0


def cmd_simulate_z(args) -> int:
    raw = json.loads(Path(args.params).read_text(encoding="utf-8"))
    if isinstance(raw, dict):
        raw = [raw]
    points = [ContactPointParams.from_json(json.dumps(p)) for p in raw]
    d_y = args.d_y or (max(max(p.active) for p in points) + 1)
    cfg = ZSimConfig(B=args.truncation, cells_per_axis=args.cells,
                     n_sims=args.sims, seed=args.seed)
    samples = simulate_Z(points, d_y, cfg)
    out = args.out or "z_samples.csv"
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"Z{j + 1}" for j in range(d_y)])
        w.writerows(samples.tolist())
    s = Aggregator()
    qs = {q: z_quantile(samples, s, q) for q in args.quantiles}
    print(json.dumps({"out": out, "n_sims": cfg.n_sims,
                      "quantiles_of_S": qs}))
    return 0


def cmd_pretest(args) -> int:
    data, model = _load(args)
    theta = _parse_theta(args.theta)
    report = run_pretest(model, data, theta, h=args.bandwidth,
                         plan=PretestPlan())
    _write_json(args.out, pretest_report_json(report))
    return 0


def cmd_hist(args) -> int:
    hist = scaled_histogram(args.design, args.n, args.beta, args.reps,
                            args.seed)
    out = Path(args.out)
    edges = hist["bin_edges"]
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "bin_lo", "bin_hi", "count"])
        for n, counts in sorted(hist["histograms"].items()):
            for k, c in enumerate(counts):
                w.writerow([n, edges[k], edges[k + 1], int(c)])
    summary = {"design": hist["design"], "beta": hist["beta"],
               "ks_distances": hist["ks_distances"]}
    if not args.no_plot:
        fig_path = out.with_suffix(".png")
        plotting.histogram_figure(hist, fig_path)
        summary["figure"] = str(fig_path)
    print(json.dumps(summary))
    return 0


def _add_data_opts(p):
    p.add_argument("--data", required=True, help="CSV file with a header row")
    p.add_argument("--model", choices=["mean", "median"], default="mean")
    p.add_argument("--x-cols", default="x",
                   help="comma-separated conditioning columns (default 'x')")
    p.add_argument("--wl-col", default="wl")
    p.add_argument("--wh-col", default="wh")


def _grid_spec(text: str):
    try:
        lo, hi, mesh = (float(v) for v in text.split(":"))
    except ValueError:
        raise ModelError(f"bad grid spec {text!r}; expected lo:hi:mesh")
    return lo, hi, mesh


def _fix_spec(text: str):
    name, _, value = text.partition("=")
    if not _:
        raise ModelError(f"bad --fix {text!r}; expected thetaK=value")
    return name.strip(), float(value)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="momentbox",
                                 description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("test", help="test one parameter value on a dataset")
    _add_data_opts(p)
    p.add_argument("--theta", required=True, help="comma-separated parameter")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--method", choices=["estimated", "conservative", "plugin"],
                   default="estimated")
    p.add_argument("--draws", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_test)

    p = sub.add_parser("region", help="invert tests over a parameter grid")
    _add_data_opts(p)
    p.add_argument("--grid", type=_grid_spec, required=True,
                   metavar="LO:HI:MESH")
    p.add_argument("--fix", type=_fix_spec, action="append",
                   metavar="THETAK=VALUE")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--method", choices=["estimated", "conservative", "plugin"],
                   default="estimated")
    p.add_argument("--draws", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_region)

    p = sub.add_parser("montecarlo", help="coverage / length experiments")
    p.add_argument("--design", type=int, choices=[1, 2], required=True)
    p.add_argument("--n", type=int, action="append", required=True)
    p.add_argument("--reps", type=int, default=300)
    p.add_argument("--alpha", type=float, action="append", default=None)
    p.add_argument("--methods", default="estimated,conservative,infeasible")
    p.add_argument("--experiment", choices=["coverage", "length"],
                   default="coverage")
    p.add_argument("--draws", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(fn=cmd_montecarlo)

    p = sub.add_parser("simulate-z", help="simulate the limit law")
    p.add_argument("--params", required=True,
                   help="JSON file with contact point parameters")
    p.add_argument("--d-y", type=int, default=None)
    p.add_argument("--truncation", type=float, default=10.0)
    p.add_argument("--cells", type=int, default=None)
    p.add_argument("--sims", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quantiles", type=lambda t: [float(v) for v in t.split(",")],
                   default=[0.9, 0.95])
    p.add_argument("--out")
    p.set_defaults(fn=cmd_simulate_z)

    p = sub.add_parser("pretest", help="contact set and Hessian pre-test")
    _add_data_opts(p)
    p.add_argument("--theta", required=True)
    p.add_argument("--bandwidth", type=float, default=None)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_pretest)

    p = sub.add_parser("hist", help="scaled statistic histograms")
    p.add_argument("--design", type=int, choices=[1, 2], required=True)
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--n", type=int, action="append", required=True)
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(fn=cmd_hist)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    if getattr(args, "alpha", None) is None and args.command == "montecarlo":
        args.alpha = [0.05]
    try:
        return args.fn(args)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
