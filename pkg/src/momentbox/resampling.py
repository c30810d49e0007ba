"""Subsampling distributions, rate-of-convergence estimation, and the
rate-adaptive test.

For a without-replacement subset S of size b, the subsample statistic is
tau_b * S(T_S(theta)) with tau_b = b^beta (uncentered), or
tau_b * [S(T_S(theta)) - S(T_n(theta))] (centered).  Centered distributions
at two block sizes identify the rate exponent: if the tau=1 quantiles scale
like c * b^(-beta), then

    beta_hat = (log q(b_small) - log q(b_large)) / (log b_large - log b_small)

averaged over a fixed set of quantiles.  A second estimate with one block
held at a small constant screens for convergence too slow for rate
adaptation; the adaptive test then either subsamples at the (truncated)
estimated rate or falls back to a conservative root-n test whose critical
value is kept away from zero by a small correction factor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from .engine import ks_statistic, min_box_exact, min_interval_1d, min_run_means_rows
from .models import Aggregator, Dataset, MomentModel, evaluate_moments

__all__ = [
    "EmpiricalDistribution",
    "SubsamplePlan",
    "RatePlan",
    "PlanError",
    "subsample_distribution",
    "estimate_beta",
    "estimate_beta_a",
    "adaptive_test",
    "fixed_rate_test",
    "RateEstimate",
    "TestResult",
]

CONSERVATIVE_CORRECTION = 0.001


class PlanError(ValueError):
    """Invalid subsampling or rate plan."""


@dataclass(frozen=True)
class EmpiricalDistribution:
    """Sorted sample of statistic values with right-continuous cdf queries."""

    values: np.ndarray

    def __post_init__(self):
        v = np.sort(np.asarray(self.values, dtype=float).ravel())
        if v.size == 0:
            raise PlanError("empirical distribution needs at least one value")
        object.__setattr__(self, "values", v)

    @property
    def count(self) -> int:
        return self.values.size

    def cdf(self, x: float) -> float:
        return float(np.searchsorted(self.values, x, side="right")) / self.count

    def quantile(self, t: float) -> float:
        """inf{x : cdf(x) >= t} for t in (0, 1]."""
        if not 0.0 < t <= 1.0:
            raise PlanError(f"quantile level must be in (0, 1], got {t}")
        k = math.ceil(t * self.count) - 1
        return float(self.values[max(k, 0)])

    def scaled(self, c: float) -> "EmpiricalDistribution":
        """Distribution of c * value for c > 0 (quantiles scale exactly)."""
        if c <= 0:
            raise PlanError("scale factor must be positive")
        return EmpiricalDistribution(self.values * c)

    def shifted(self, delta: float) -> "EmpiricalDistribution":
        return EmpiricalDistribution(self.values + delta)


@dataclass(frozen=True)
class SubsamplePlan:
    """Subsample size, draw count, centering, scaling exponent, and seed."""

    b: int
    draws: int = 1000
    centered: bool = False
    tau_exponent: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.b < 1:
            raise PlanError("subsample size must be at least 1")
        if self.draws < 1:
            raise PlanError("need at least one draw")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, s: str) -> "SubsamplePlan":
        return cls(**json.loads(s))


@dataclass(frozen=True)
class RatePlan:
    """Tuning for rate estimation and the adaptive test.

    Block sizes are ceil(n^chi1) and ceil(n^chi2) for the main rate
    estimate, a fixed small block ``b1_fixed`` paired with ceil(n^chi_a)
    for the screening estimate, and ceil(n^chi3) for the final critical
    value.  Quantiles that come out nonpositive are clamped to
    ``epsilon_floor`` before taking logs.
    """

    beta_lower: float = 0.55
    beta_upper: float = 2.0 / 3.0
    chi1: float = 0.5
    chi2: float = 1.0 / 3.0
    chi3: float = 0.5
    chi_a: float = 0.5
    b1_fixed: int = 5
    quantiles: tuple = (0.5, 0.9, 0.95)
    floor_half: bool = True
    epsilon_floor: float = 1e-10

    def __post_init__(self):
        if not (0.5 <= self.beta_lower < self.beta_upper < 1.0):
            raise PlanError("need 1/2 <= beta_lower < beta_upper < 1")
        if not (0.0 < self.chi2 < self.chi1 < 1.0):
            raise PlanError("need 0 < chi2 < chi1 < 1")
        if not (0.0 < self.chi3 < 1.0 and 0.0 < self.chi_a < 1.0):
            raise PlanError("chi3 and chi_a must lie in (0, 1)")
        if self.b1_fixed < 2:
            raise PlanError("the fixed block must have at least 2 points")
        if self.epsilon_floor <= 0:
            raise PlanError("epsilon_floor must be positive")

    def block_sizes(self, n: int):
        return (math.ceil(n ** self.chi1), math.ceil(n ** self.chi2))

    def to_json(self) -> str:
        d = asdict(self)
        d["quantiles"] = list(self.quantiles)
        return json.dumps(d)

    @classmethod
    def from_json(cls, s: str) -> "RatePlan":
        d = json.loads(s)
        d["quantiles"] = tuple(d["quantiles"])
        return cls(**d)


@dataclass(frozen=True)
class RateEstimate:
    """Rate exponent estimate plus degeneracy metadata."""

    value: float
    clamped: bool
    per_quantile: tuple


@dataclass(frozen=True)
class TestResult:
    reject: bool
    stat: float
    critical_value: float
    beta_used: float
    branch: str
    beta_hat: float | None = None
    beta_a: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self))


# ---------------------------------------------------------------------------
# Raw subsample machinery.

class _StatContext:
    """Caches the evaluated moment matrix and sort order for one
    (model, data, theta, aggregator) tuple so repeated subsampling does not
    re-evaluate the model."""

    def __init__(self, model: MomentModel, data: Dataset, theta, s: Aggregator):
        self.model = model
        self.data = data
        self.s = s
        self.m = evaluate_moments(model, data, theta)
        self.n = data.n
        self.d = data.d
        if self.d == 1:
            self.order = np.argsort(data.x[:, 0], kind="stable")
            self.x_sorted = data.x[self.order, 0]
            self.m_sorted = self.m[self.order]
            self.has_ties = bool((np.diff(self.x_sorted) == 0).any())
        else:
            self.has_ties = True  # routes to the general per-draw path

    def raw_values(self, b: int, draws: int, seed) -> np.ndarray:
        """Uncentered tau=1 subsample statistics S(T_S), one per draw.

        Draw i uses the RNG stream spawned as child i of SeedSequence(seed),
        so parallel and serial schedules agree.
        """
        if b >= self.n:
            raise PlanError(f"subsample size b={b} must be < n={self.n}")
        children = np.random.SeedSequence(seed).spawn(draws)
        subsets = np.empty((draws, b), dtype=np.intp)
        for i, child in enumerate(children):
            rng = np.random.default_rng(child)
            subsets[i] = np.sort(rng.choice(self.n, size=b, replace=False))
        if self.d == 1 and not self.has_ties:
            # subsets index the x-sorted arrays; sorted subsets stay x-ordered
            infs = np.empty((draws, self.m.shape[1]))
            for j in range(self.m.shape[1]):
                infs[:, j] = min_run_means_rows(self.m_sorted[subsets, j])
            return self.s.rowwise(infs)
        out = np.empty(draws)
        for i in range(draws):
            idx = subsets[i]
            if self.d == 1:
                sub_order = idx  # already sorted positions of x-sorted data
                vals = [min_interval_1d(self.x_sorted[sub_order],
                                        self.m_sorted[sub_order, j])[0]
                        for j in range(self.m.shape[1])]
            else:
                vals = [min_box_exact(self.data.x[idx], self.m[idx, j])[0]
                        for j in range(self.m.shape[1])]
            out[i] = self.s(np.array(vals))
        return out


def subsample_distribution(model: MomentModel, data: Dataset, theta,
                           s: Aggregator, plan: SubsamplePlan,
                           full_stat: float | None = None) -> EmpiricalDistribution:
    """Empirical distribution of scaled subsample statistics.

    Uncentered: tau_b * S(T_S); centered: tau_b * (S(T_S) - full_stat) with
    ``full_stat`` = S(T_n) supplied by the caller.  tau_b = b^tau_exponent.
    Deterministic given ``plan.seed``.
    """
    if plan.centered and full_stat is None:
        raise PlanError("centered subsampling requires the full-sample statistic")
    ctx = _StatContext(model, data, theta, s)
    raw = ctx.raw_values(plan.b, plan.draws, plan.seed)
    if plan.centered:
        raw = raw - full_stat
    tau = plan.b ** plan.tau_exponent
    return EmpiricalDistribution(raw * tau)


def beta_from_distributions(dist_big: EmpiricalDistribution, b_big: int,
                            dist_small: EmpiricalDistribution, b_small: int,
                            quantiles=(0.5, 0.9, 0.95),
                            epsilon_floor: float = 1e-10) -> RateEstimate:
    """Rate exponent from two centered tau=1 distributions at distinct
    block sizes; exactly invariant to a common positive rescaling of the
    quantiles (the log difference cancels it)."""
    if b_big == b_small:
        raise PlanError("block sizes must differ")
    per_q = []
    clamped = False
    for t in quantiles:
        q_big = dist_big.quantile(t)
        q_small = dist_small.quantile(t)
        if q_big <= 0 or q_small <= 0:
            clamped = True
        q_big = max(q_big, epsilon_floor)
        q_small = max(q_small, epsilon_floor)
        per_q.append((math.log(q_small) - math.log(q_big))
                     / (math.log(b_big) - math.log(b_small)))
    return RateEstimate(value=float(np.mean(per_q)), clamped=clamped,
                        per_quantile=tuple(per_q))


def _centered_dist(ctx: _StatContext, b: int, draws: int, seed,
                   full_stat: float) -> EmpiricalDistribution:
    return EmpiricalDistribution(ctx.raw_values(b, draws, seed) - full_stat)


def _block_seeds(seed: int, k: int):
    """Distinct deterministic child seeds for the per-block-size draw sets."""
    return [int(v) for v in np.random.SeedSequence(seed).generate_state(k, np.uint64)]


def estimate_beta(model: MomentModel, data: Dataset, theta, s: Aggregator,
                  rate_plan: RatePlan = RatePlan(), *, draws: int = 1000,
                  seed: int = 0) -> RateEstimate:
    """Rate exponent from blocks ceil(n^chi1) > ceil(n^chi2), centered."""
    ctx = _StatContext(model, data, theta, s)
    b1, b2 = rate_plan.block_sizes(data.n)
    if not b1 > b2 >= 2:
        raise PlanError(f"blocks ({b1}, {b2}) must satisfy b1 > b2 >= 2")
    full = float(s(ks_statistic(model, data, theta).inf_values))
    s1, s2 = _block_seeds(seed, 2)
    d1 = _centered_dist(ctx, b1, draws, s1, full)
    d2 = _centered_dist(ctx, b2, draws, s2, full)
    return beta_from_distributions(d1, b1, d2, b2, rate_plan.quantiles,
                                   rate_plan.epsilon_floor)


def estimate_beta_a(model: MomentModel, data: Dataset, theta, s: Aggregator,
                    rate_plan: RatePlan = RatePlan(), *, draws: int = 1000,
                    seed: int = 0) -> RateEstimate:
    """Screening rate estimate pairing the fixed block ``b1_fixed`` with
    ceil(n^chi_a); the zero-quantile guard keeps it defined when subsample
    statistics collapse to a point mass."""
    ctx = _StatContext(model, data, theta, s)
    bf = rate_plan.b1_fixed
    ba = math.ceil(data.n ** rate_plan.chi_a)
    if ba == bf:
        raise PlanError(
            f"screening blocks coincide (both {bf}); adjust chi_a or b1_fixed"
        )
    full = float(s(ks_statistic(model, data, theta).inf_values))
    s1, s2 = _block_seeds(seed, 2)
    big, small = (ba, bf) if ba > bf else (bf, ba)
    d_big = _centered_dist(ctx, big, draws, s1, full)
    d_small = _centered_dist(ctx, small, draws, s2, full)
    return beta_from_distributions(d_big, big, d_small, small,
                                   rate_plan.quantiles, rate_plan.epsilon_floor)


def _conservative_cv(raw_b: np.ndarray, b: int, alpha: float) -> float:
    dist = EmpiricalDistribution(raw_b * math.sqrt(b))
    return max(dist.quantile(1 - alpha), 0.0) + CONSERVATIVE_CORRECTION


def adaptive_test(model: MomentModel, data: Dataset, theta, s: Aggregator,
                  alpha: float, rate_plan: RatePlan = RatePlan(), *,
                  draws: int = 1000, seed: int = 0) -> TestResult:
    """Rate-adaptive test of H0: E(m(W, theta) | X) >= 0.

    The screening estimate decides the branch: when it clears
    ``beta_lower`` the statistic is compared at the truncated estimated
    rate against an uncentered subsample quantile; otherwise a root-n test
    with a floor-corrected critical value is used.  Deterministic given
    ``seed``.
    """
    if not 0.0 < alpha < 1.0:
        raise PlanError("alpha must lie in (0, 1)")
    ctx = _StatContext(model, data, theta, s)
    n = data.n
    full = float(s(ks_statistic(model, data, theta).inf_values))

    b1, b2 = rate_plan.block_sizes(n)
    bf = rate_plan.b1_fixed
    ba = math.ceil(n ** rate_plan.chi_a)
    b3 = math.ceil(n ** rate_plan.chi3)
    blocks = sorted({b1, b2, bf, ba, b3})
    seeds = dict(zip(blocks, _block_seeds(seed, len(blocks))))
    raw = {b: ctx.raw_values(b, draws, seeds[b]) for b in blocks}

    def centered(b):
        return EmpiricalDistribution(raw[b] - full)

    beta_hat = beta_from_distributions(centered(b1), b1, centered(b2), b2,
                                       rate_plan.quantiles, rate_plan.epsilon_floor)
    big, small = (ba, bf) if ba > bf else (bf, ba)
    beta_a = beta_from_distributions(centered(big), big, centered(small), small,
                                     rate_plan.quantiles, rate_plan.epsilon_floor)

    if beta_a.value >= rate_plan.beta_lower:
        beta_used = min(beta_hat.value, rate_plan.beta_upper)
        if rate_plan.floor_half:
            beta_used = max(beta_used, 0.5)
        cv = EmpiricalDistribution(raw[b3] * b3 ** beta_used).quantile(1 - alpha)
        stat = n ** beta_used * full
        return TestResult(reject=bool(stat > cv), stat=stat, critical_value=cv,
                          beta_used=beta_used, branch="adaptive",
                          beta_hat=beta_hat.value, beta_a=beta_a.value)
    cv = _conservative_cv(raw[b3], b3, alpha)
    stat = math.sqrt(n) * full
    return TestResult(reject=bool(stat > cv), stat=stat, critical_value=cv,
                      beta_used=0.5, branch="conservative",
                      beta_hat=beta_hat.value, beta_a=beta_a.value)


def fixed_rate_test(model: MomentModel, data: Dataset, theta, s: Aggregator,
                    alpha: float, beta: float, *, chi3: float = 0.5,
                    draws: int = 1000, seed: int = 0,
                    conservative_correction: bool = False) -> TestResult:
    """Subsample test at a known rate exponent.

    With beta = 1/2 and ``conservative_correction`` the critical value is
    max(quantile, 0) + 0.001, which keeps the test level when the true rate
    is faster than root-n.
    """
    if not 0.0 < alpha < 1.0:
        raise PlanError("alpha must lie in (0, 1)")
    ctx = _StatContext(model, data, theta, s)
    n = data.n
    full = float(s(ks_statistic(model, data, theta).inf_values))
    b = math.ceil(n ** chi3)
    raw = ctx.raw_values(b, draws, _block_seeds(seed, 1)[0])
    if conservative_correction:
        cv = _conservative_cv(raw, b, alpha) if beta == 0.5 else (
            max(EmpiricalDistribution(raw * b ** beta).quantile(1 - alpha), 0.0)
            + CONSERVATIVE_CORRECTION)
    else:
        cv = EmpiricalDistribution(raw * b ** beta).quantile(1 - alpha)
    stat = n ** beta * full
    branch = "conservative" if conservative_correction else "fixed"
    return TestResult(reject=bool(stat > cv), stat=stat, critical_value=cv,
                      beta_used=beta, branch=branch)
