"""Benchmark data-generating designs for the interval mean regression model.

Both designs draw X ~ U(-1, 1), U ~ U(-1, 1) and set W* = 0 + 0.1 X + U,
censoring W* to the known support [-1.1, 1.1] with probability p*(x):

* design 1: p*(x) = min(quartic(x), 1), a smooth but wiggly missing
  probability whose induced upper conditional mean has a unique quadratic
  tangency on the boundary of the identified set;
* design 2: p*(x) = min(max(|x - 1/2|, 1/4) - 0.15, 0.7), whose flat floor
  produces an interval of binding points (root-n regime).

The upper moment E(W^H | X = x) - theta1 - theta2 x binds with tangency at
theta = (min_x[E(W^H|x) - 0.1 x], 0.1) for design 1 (the minimum evaluates
to 0.104983...), and identically on [1/4, 3/4] at exactly (0.11, 0.09) for
design 2.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
import scipy.optimize

from .models import CallbackModel, Dataset

__all__ = [
    "DesignConfig",
    "generate_design",
    "missing_probability",
    "upper_mean",
    "lower_mean",
    "upper_mean_curvature",
    "true_boundary",
    "boundary_theta",
    "exact_rate_exponent",
    "upper_moment_model",
    "D1_CONTACT_X",
]

_QUARTIC = (0.9481, 1.0667, -0.6222, -0.6519, 0.3889)


def _quartic(x):
    a4, a3, a2, a1, a0 = _QUARTIC
    return ((a4 * x + a3) * x + a2) * x ** 2 + a1 * x + a0


def _quartic_d1(x):
    a4, a3, a2, a1, _ = _QUARTIC
    return 4 * a4 * x ** 3 + 3 * a3 * x ** 2 + 2 * a2 * x + a1


def _quartic_d2(x):
    a4, a3, a2, _, _ = _QUARTIC
    return 12 * a4 * x ** 2 + 6 * a3 * x + 2 * a2


def missing_probability(design: int, x):
    """p*(x) for the requested design, valid on [-1, 1]."""
    x = np.asarray(x, dtype=float)
    if design == 1:
        return np.minimum(_quartic(x), 1.0)
    if design == 2:
        return np.minimum(np.maximum(np.abs(x - 0.5), 0.25) - 0.15, 0.7)
    raise ValueError(f"unknown design {design}")


@dataclass(frozen=True)
class DesignConfig:
    """Sampling configuration for one replication."""

    design: int
    n: int
    seed: int | np.random.SeedSequence = 0
    theta_star: tuple = (0.0, 0.1)
    bounds: tuple = (-1.1, 1.1)

    def __post_init__(self):
        if self.design not in (1, 2):
            raise ValueError("design must be 1 or 2")
        if self.n < 1:
            raise ValueError("need n >= 1")


def generate_design(cfg: DesignConfig) -> Dataset:
    """Draw one sample: observed rows have W^L = W^H = W*, censored rows
    carry the support endpoints."""
    rng = np.random.default_rng(cfg.seed)
    x = rng.uniform(-1.0, 1.0, cfg.n)
    u = rng.uniform(-1.0, 1.0, cfg.n)
    wstar = cfg.theta_star[0] + cfg.theta_star[1] * x + u
    miss = rng.uniform(0.0, 1.0, cfg.n) < missing_probability(cfg.design, x)
    wh = np.where(miss, cfg.bounds[1], wstar)
    wl = np.where(miss, cfg.bounds[0], wstar)
    return Dataset(x=x[:, None], w=np.column_stack([wl, wh]))


def upper_mean(design: int, x, theta_star=(0.0, 0.1), bounds=(-1.1, 1.1)):
    """Analytic E(W^H | X = x)."""
    x = np.asarray(x, dtype=float)
    p = missing_probability(design, x)
    reg = theta_star[0] + theta_star[1] * x
    return (1.0 - p) * reg + p * bounds[1]


def lower_mean(design: int, x, theta_star=(0.0, 0.1), bounds=(-1.1, 1.1)):
    """Analytic E(W^L | X = x)."""
    x = np.asarray(x, dtype=float)
    p = missing_probability(design, x)
    reg = theta_star[0] + theta_star[1] * x
    return (1.0 - p) * reg + p * bounds[0]


def upper_mean_curvature(design: int, x):
    """Second derivative of E(W^H|x) - theta1 - theta2*x (slope-free).

    Design 1 (below the p* = 1 cap): d^2/dx^2 [q(x)(1.1 - 0.1x)]
    = q''(x)(1.1 - 0.1x) - 0.2 q'(x).  Design 2 is piecewise linear in p*,
    so the curvature is -0.2 p*'(x) on the linear pieces and 0 on the flats.
    """
    x = np.asarray(x, dtype=float)
    if design == 1:
        if np.any(_quartic(x) >= 1.0):
            raise ValueError("curvature formula invalid where p* is capped at 1")
        return _quartic_d2(x) * (1.1 - 0.1 * x) - 0.2 * _quartic_d1(x)
    slope = np.where(np.abs(x - 0.5) <= 0.25, 0.0, np.sign(x - 0.5))
    slope = np.where(missing_probability(2, x) >= 0.7, 0.0, slope)
    return -0.2 * slope


def _upper_objective(design, theta2):
    def f(x):
        return upper_mean(design, x) - theta2 * x
    return f


@functools.lru_cache(maxsize=None)
def true_boundary(design: int, component: str = "upper",
                  theta2: float | None = None) -> float:
    """Endpoint of the identified set for the intercept at a fixed slope.

    Upper component: min over x of E(W^H|x) - theta2*x (largest admissible
    intercept); lower component: max over x of E(W^L|x) - theta2*x.  A
    dense grid locates the basin and a bounded scalar minimizer polishes it.
    """
    if theta2 is None:
        theta2 = {1: 0.1, 2: 0.09}[design]
    sign = 1.0 if component == "upper" else -1.0
    if component == "upper":
        obj = _upper_objective(design, theta2)
    elif component == "lower":
        def obj(x):
            return -(lower_mean(design, x) - theta2 * x)
    else:
        raise ValueError("component must be 'upper' or 'lower'")
    grid = np.linspace(-1.0, 1.0, 200001)
    vals = obj(grid)
    k = int(np.argmin(vals))
    lo = grid[max(k - 1, 0)]
    hi = grid[min(k + 1, grid.size - 1)]
    res = scipy.optimize.minimize_scalar(obj, bounds=(lo, hi), method="bounded",
                                         options={"xatol": 1e-12})
    best = min(float(res.fun), float(vals[k]))
    return sign * best


def boundary_theta(design: int) -> tuple:
    """(theta1, theta2) on the boundary of the identified set where the
    upper moment binds: (0.104983..., 0.1) for design 1 and exactly
    (0.11, 0.09) for design 2."""
    theta2 = {1: 0.1, 2: 0.09}[design]
    return (true_boundary(design, "upper", theta2), theta2)


D1_CONTACT_X = 0.5019819  # argmin of the design-1 upper mean less 0.1 x


def exact_rate_exponent(design: int) -> float:
    """Rate exponent of the statistic at the boundary: (d+2)/(d+4) = 3/5
    under quadratic tangency (design 1), 1/2 under the positive-probability
    contact of design 2."""
    return 0.6 if design == 1 else 0.5


def upper_moment_model(bound: float = 4.0) -> CallbackModel:
    """One-sided model using only the upper moment: m = W^H - t1 - t2 x.
    The confidence-interval experiments restrict attention to this moment."""

    def fn(w, x, theta):
        return (w[:, 1] - theta[0] - theta[1] * x[:, 0])[:, None]

    return CallbackModel(fn, d_y=1, n_params=2, bound=bound)
