"""Monte Carlo experiments: coverage at the boundary, confidence-interval
excess length by test inversion, scaled-statistic stability, and local
power curves.

Replications derive independent RNG streams from a master seed, so results
are reproducible and independent of execution schedule.  The
confidence-interval scan exploits that the upper-moment statistic is
monotone in the intercept: parameters small enough that the sample shows no
violation are certified non-rejections for every subsampling method (the
critical values are nonnegative), so the downward grid scan can stop there
without changing the answer relative to a full scan.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import designs
from .designs import DesignConfig, boundary_theta, exact_rate_exponent, generate_design
from .engine import ks_statistic, scaled_statistic
from .limitsim import ContactPointParams, ZSimConfig, simulate_Z, z_quantile
from .models import Aggregator, Dataset, MomentModel
from .pretest import PretestPlan, contact_point_params, default_bandwidth, run_pretest
from .resampling import RatePlan, TestResult, adaptive_test, fixed_rate_test

__all__ = [
    "ExperimentReport",
    "CIEndpoint",
    "decide_method",
    "plugin_test",
    "coverage_experiment",
    "ci_upper_endpoint",
    "excess_length_experiment",
    "scaled_histogram",
    "local_power_curve",
    "kolmogorov_distance",
    "METHODS",
]

METHODS = ("estimated", "conservative", "infeasible", "plugin")


@dataclass
class ExperimentReport:
    """Aggregated experiment output, JSON- and CSV-serializable."""

    kind: str
    design: int
    reps: int
    seed: int
    alphas: list
    methods: list
    n_values: list
    rows: list = field(default_factory=list)
    rate_summary: dict = field(default_factory=dict)
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, default=float)

    def csv_rows(self):
        if not self.rows:
            return []
        header = sorted({k for r in self.rows for k in r})
        out = [header]
        for r in self.rows:
            out.append([r.get(k, "") for k in header])
        return out


def plugin_test(model: MomentModel, data: Dataset, theta, s: Aggregator,
                alpha: float, h: float | None = None,
                plan: PretestPlan = PretestPlan(),
                zcfg: ZSimConfig | None = None, seed: int = 0,
                v_floor: float = 1e-3) -> TestResult:
    """Test that simulates the limit law from plug-in estimates.

    Runs the contact-set pipeline, packages density / second-moment /
    Hessian estimates at the contact points, simulates Z on the truncated
    grid, and compares the n^((d+2)/(d+4))-scaled statistic to the
    simulated 1-alpha quantile of S(Z).  With an empty estimated contact
    set every moment looks slack and the test never rejects.  Hessian
    estimates are eigenvalue-floored at ``v_floor`` to keep the simulated
    drift coercive under estimation noise.
    """
    n, d = data.n, data.d
    res = ks_statistic(model, data, theta)
    stat = scaled_statistic(res, s, (d + 2) / (d + 4))
    report = run_pretest(model, data, theta, h=h, plan=plan)
    points = contact_point_params(model, data, theta, report, h=h,
                                  kernel=plan.kernel)
    if not points:
        return TestResult(reject=False, stat=stat, critical_value=math.inf,
                          beta_used=(d + 2) / (d + 4), branch="plugin-empty")
    floored = []
    for p in points:
        vs = []
        for v in p.v_hats:
            vals, vecs = np.linalg.eigh(v)
            vs.append((vecs * np.maximum(vals, v_floor)) @ vecs.T)
        floored.append(ContactPointParams(
            x_k=p.x_k, f_hat=p.f_hat, m2_hat=p.m2_hat, v_hats=tuple(vs),
            active=p.active))
    zcfg = zcfg or ZSimConfig(seed=seed)
    samples = simulate_Z(floored, model.d_y, zcfg)
    cv = z_quantile(samples, s, 1 - alpha)
    return TestResult(reject=bool(stat > cv), stat=stat, critical_value=cv,
                      beta_used=(d + 2) / (d + 4), branch="plugin")


def decide_method(method: str, model: MomentModel, data: Dataset, theta,
                  s: Aggregator, alpha: float, *, rate_plan: RatePlan = RatePlan(),
                  draws: int = 1000, seed: int = 0,
                  exact_beta: float | None = None,
                  zcfg: ZSimConfig | None = None) -> TestResult:
    """Dispatch one test decision.

    estimated    : rate-adaptive subsampling test;
    conservative : root-n subsampling with the floor-corrected critical value;
    infeasible   : subsampling at a supplied known rate exponent;
    plugin       : simulated limit law from plug-in estimates.
    """
    if method == "estimated":
        return adaptive_test(model, data, theta, s, alpha, rate_plan,
                             draws=draws, seed=seed)
    if method == "conservative":
        return fixed_rate_test(model, data, theta, s, alpha, 0.5,
                               chi3=rate_plan.chi3, draws=draws, seed=seed,
                               conservative_correction=True)
    if method == "infeasible":
        if exact_beta is None:
            raise ValueError("infeasible method needs the true rate exponent")
        return fixed_rate_test(model, data, theta, s, alpha, exact_beta,
                               chi3=rate_plan.chi3, draws=draws, seed=seed)
    if method == "plugin":
        return plugin_test(model, data, theta, s, alpha, zcfg=zcfg, seed=seed)
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


def _rep_seeds(seed: int, reps: int):
    return np.random.SeedSequence(seed).spawn(reps)


def coverage_experiment(design: int, n_list, methods, alpha_list, reps: int,
                        seed: int = 0, *, draws: int = 1000,
                        rate_plan: RatePlan = RatePlan()) -> ExperimentReport:
    """Rejection frequency at the boundary parameter of the identified set.

    Coverage of the inverted confidence region equals one minus the
    rejection rate, reported per (n, method, alpha).
    """
    t0 = time.perf_counter()
    s = Aggregator()
    theta = boundary_theta(design)
    model = designs.upper_moment_model()
    report = ExperimentReport(kind="coverage", design=design, reps=reps,
                              seed=seed, alphas=list(alpha_list),
                              methods=list(methods), n_values=list(n_list),
                              config={"draws": draws, "theta": list(theta),
                                      "rate_plan": rate_plan.to_json()})
    beta_true = exact_rate_exponent(design)
    for n in n_list:
        counts = {(m, a): 0 for m in methods for a in alpha_list}
        betas, beta_as, branches = [], [], 0
        for child in _rep_seeds(seed, reps):
            data_seed, test_seed = child.spawn(2)
            data = generate_design(DesignConfig(design=design, n=n, seed=data_seed))
            for m in methods:
                for a in alpha_list:
                    res = decide_method(m, model, data, theta, s, a,
                                        rate_plan=rate_plan, draws=draws,
                                        seed=test_seed,
                                        exact_beta=beta_true)
                    counts[(m, a)] += res.reject
                    if m == "estimated" and a == alpha_list[0]:
                        betas.append(res.beta_used)
                        beta_as.append(res.beta_a)
                        branches += (res.branch == "conservative")
        for m in methods:
            for a in alpha_list:
                report.rows.append({
                    "n": n, "method": m, "alpha": a,
                    "coverage": 1.0 - counts[(m, a)] / reps,
                    "rejections": counts[(m, a)],
                })
        if betas:
            report.rate_summary[str(n)] = {
                "mean_beta_used": float(np.mean(betas)),
                "mean_beta_a": float(np.mean([b for b in beta_as if b is not None])),
                "conservative_branch_rate": branches / reps,
            }
    report.wall_time = time.perf_counter() - t0
    return report


@dataclass(frozen=True)
class CIEndpoint:
    """Largest non-rejected grid value for the intercept."""

    upper: float
    empty: bool = False
    at_grid_edge: bool = False
    tested: int = 0


def ci_upper_endpoint(data: Dataset, theta2: float, alpha: float, method: str,
                      grid: tuple, *, s: Aggregator | None = None,
                      rate_plan: RatePlan = RatePlan(), draws: int = 1000,
                      seed: int = 0, exact_beta: float | None = None,
                      model: MomentModel | None = None) -> CIEndpoint:
    """Largest intercept on the grid not rejected at level alpha.

    ``grid`` is (lo, hi, mesh).  The scan runs from the top down;
    intercepts whose full-sample statistic is exactly zero are certified
    acceptances (all critical values are nonnegative and the conservative
    ones strictly positive), located by bisection, which cannot change the
    answer relative to scanning every point.  Returns NaN with
    ``empty=True`` when everything on the grid is rejected, and flags the
    answer when the top of the grid is never rejected.
    """
    lo, hi, mesh = grid
    if not (lo < hi and mesh > 0):
        raise ValueError("grid must satisfy lo < hi with positive mesh")
    s = s or Aggregator()
    model = model or designs.upper_moment_model()
    values = np.round(np.arange(lo, hi + mesh / 2, mesh), 12)

    def full_stat(t1):
        return s(ks_statistic(model, data, (t1, theta2)).inf_values)

    # bisect the largest grid index with a zero statistic (certified accept)
    lo_i, hi_i = 0, values.size - 1
    zero_idx = -1
    if full_stat(values[0]) == 0.0:
        while lo_i < hi_i:
            mid = (lo_i + hi_i + 1) // 2
            if full_stat(values[mid]) == 0.0:
                lo_i = mid
            else:
                hi_i = mid - 1
        zero_idx = lo_i
    tested = 0
    for k in range(values.size - 1, zero_idx, -1):
        res = decide_method(method, model, data, (values[k], theta2), s, alpha,
                            rate_plan=rate_plan, draws=draws, seed=seed,
                            exact_beta=exact_beta)
        tested += 1
        if not res.reject:
            return CIEndpoint(upper=float(values[k]),
                              at_grid_edge=(k == values.size - 1), tested=tested)
    if zero_idx >= 0:
        return CIEndpoint(upper=float(values[zero_idx]), tested=tested)
    return CIEndpoint(upper=math.nan, empty=True, tested=tested)


def excess_length_experiment(design: int, n_list, methods, alpha: float,
                             reps: int, seed: int = 0, *, draws: int = 500,
                             mesh: float = 0.01, pad: float = 1.0,
                             rate_plan: RatePlan = RatePlan()) -> ExperimentReport:
    """Mean distance between the confidence interval's upper endpoint and
    the true upper endpoint of the identified set (test inversion on a
    mesh-width grid bracketing the boundary).  Replications with an empty
    region are excluded from the mean and counted."""
    t0 = time.perf_counter()
    s = Aggregator()
    theta1, theta2 = boundary_theta(design)
    beta_true = exact_rate_exponent(design)
    grid = (theta1 - pad, theta1 + pad, mesh)
    report = ExperimentReport(kind="excess-length", design=design, reps=reps,
                              seed=seed, alphas=[alpha], methods=list(methods),
                              n_values=list(n_list),
                              config={"draws": draws, "grid": list(grid),
                                      "boundary": theta1})
    for n in n_list:
        acc = {m: [] for m in methods}
        empties = {m: 0 for m in methods}
        edges = {m: 0 for m in methods}
        for child in _rep_seeds(seed, reps):
            data_seed, test_seed = child.spawn(2)
            data = generate_design(DesignConfig(design=design, n=n, seed=data_seed))
            for m in methods:
                end = ci_upper_endpoint(data, theta2, alpha, m, grid,
                                        s=s, rate_plan=rate_plan, draws=draws,
                                        seed=test_seed, exact_beta=beta_true)
                if end.empty:
                    empties[m] += 1
                else:
                    acc[m].append(end.upper - theta1)
                    edges[m] += end.at_grid_edge
        for m in methods:
            report.rows.append({
                "n": n, "method": m, "alpha": alpha,
                "mean_excess": float(np.mean(acc[m])) if acc[m] else math.nan,
                "median_excess": float(np.median(acc[m])) if acc[m] else math.nan,
                "empty_regions": empties[m],
                "grid_edge_hits": edges[m],
            })
    report.wall_time = time.perf_counter() - t0
    return report


def scaled_histogram(design: int, n_list, beta: float, reps: int,
                     seed: int = 0, bins: int = 40):
    """Distribution of n^beta * S(T_n) at the boundary parameter across
    sample sizes; stable when beta matches the true rate exponent.

    Returns a dict with per-n sorted values, shared histogram bins, and the
    Kolmogorov distances between consecutive sample sizes.
    """
    s = Aggregator()
    theta = boundary_theta(design)
    model = designs.upper_moment_model()
    values = {}
    for n in n_list:
        vals = np.empty(reps)
        for r, child in enumerate(_rep_seeds(seed, reps)):
            data = generate_design(DesignConfig(design=design, n=n, seed=child))
            vals[r] = scaled_statistic(ks_statistic(model, data, theta), s, beta)
        values[int(n)] = np.sort(vals)
    top = max(v[-1] for v in values.values())
    edges = np.linspace(0.0, float(top) * 1.0001, bins + 1)
    hists = {n: np.histogram(v, bins=edges)[0] for n, v in values.items()}
    ns = sorted(values)
    ks = {f"{a}->{b}": kolmogorov_distance(values[a], values[b])
          for a, b in zip(ns, ns[1:])}
    return {"design": design, "beta": beta, "reps": reps, "seed": seed,
            "values": values, "bin_edges": edges, "histograms": hists,
            "ks_distances": ks}


def local_power_curve(design: int, n: int, alpha: float, offsets, method: str,
                      reps: int = 300, seed: int = 0, *, draws: int = 500,
                      offset_scale: str = "physical",
                      rate_plan: RatePlan = RatePlan()):
    """Rejection rate at intercepts displaced above the boundary.

    offset_scale: 'physical' uses the offsets as-is; 'exact-rate' scales by
    n^(-2/(d+4)) (alternatives the exact test detects); 'conservative-rate'
    by n^(-1/(d+2)).
    """
    s = Aggregator()
    theta1, theta2 = boundary_theta(design)
    beta_true = exact_rate_exponent(design)
    model = designs.upper_moment_model()
    d = 1
    scale = {"physical": 1.0,
             "exact-rate": n ** (-2.0 / (d + 4)),
             "conservative-rate": n ** (-1.0 / (d + 2))}[offset_scale]
    offsets = list(offsets)
    counts = {a: 0 for a in offsets}
    for child in _rep_seeds(seed, reps):
        data_seed, test_seed = child.spawn(2)
        data = generate_design(DesignConfig(design=design, n=n, seed=data_seed))
        for a in offsets:
            theta = (theta1 + a * scale, theta2)
            res = decide_method(method, model, data, theta, s, alpha,
                                rate_plan=rate_plan, draws=draws,
                                seed=test_seed, exact_beta=beta_true)
            counts[a] += res.reject
    return {a: counts[a] / reps for a in offsets}


def kolmogorov_distance(a, b) -> float:
    """Sup distance between the empirical cdfs of two samples."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    allv = np.concatenate([a, b])
    fa = np.searchsorted(a, allv, side="right") / a.size
    fb = np.searchsorted(b, allv, side="right") / b.size
    return float(np.abs(fa - fb).max())
