"""Datasets, moment models and aggregation for conditional moment inequality testing.

The testing problem is H0: E(m(W_i, theta) | X_i) >= 0 a.s., where each
observation carries conditioning variables X_i (continuous, d columns) and
raw outcome columns W_i.  A moment model maps a W-row and a parameter vector
to a d_y-vector of moments; an aggregator S collapses the vector of
box-infima into a scalar test statistic, S(v) = 0 whenever v >= 0.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Dataset",
    "MomentModel",
    "IntervalMeanModel",
    "IntervalMedianModel",
    "CallbackModel",
    "Aggregator",
    "evaluate_moments",
    "aggregate",
    "load_interval_csv",
]


class ModelError(ValueError):
    """Bad model inputs: arity mismatch, bound violations, malformed data."""


@dataclass(frozen=True)
class Dataset:
    """Immutable sample of conditioning variables and raw outcome columns.

    x : (n, d) array of conditioning variables, all finite.
    w : (n, p) array of outcome columns.  Entries may be +inf (an upper
        endpoint carrying no information) or -inf (same for a lower
        endpoint); everything else must be finite.
    """

    x: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        w = np.atleast_2d(np.asarray(self.w, dtype=float))
        if x.ndim != 2 or w.ndim != 2:
            raise ModelError("x and w must be 2-d arrays")
        if x.shape[0] != w.shape[0]:
            raise ModelError(
                f"row mismatch: x has {x.shape[0]} rows, w has {w.shape[0]}"
            )
        if x.shape[0] < 1:
            raise ModelError("dataset must contain at least one row")
        if not np.isfinite(x).all():
            raise ModelError("conditioning variables must be finite")
        if np.isnan(w).any():
            raise ModelError("w may contain +/-inf but not NaN")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "w", w)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]


class MomentModel:
    """Base moment model: maps (w-row, theta) to a d_y-vector.

    Subclasses set ``d_y``, ``n_params`` and ``bound`` (an a.s. bound on
    |m_j|) and implement ``evaluate_matrix``.  Evaluation must be
    deterministic and, for rows in the model's support, return finite values
    within ``bound``.
    """

    d_y: int
    n_params: int
    bound: float

    def evaluate_matrix(self, w: np.ndarray, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        """Vectorized evaluation over all rows; returns an (n, d_y) array."""
        raise NotImplementedError

    def evaluate(self, w_row: np.ndarray, x_row: np.ndarray, theta) -> np.ndarray:
        """Single-row evaluation (convenience wrapper over the matrix form)."""
        out = self.evaluate_matrix(
            np.atleast_2d(np.asarray(w_row, dtype=float)),
            np.atleast_2d(np.asarray(x_row, dtype=float)),
            np.asarray(theta, dtype=float),
        )
        return out[0]

    def _check_theta(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.size != self.n_params:
            raise ModelError(
                f"theta has length {theta.size}, model expects {self.n_params}"
            )
        return theta


def _linear_index(x: np.ndarray, theta: np.ndarray, intercept: bool) -> np.ndarray:
    if intercept:
        return theta[0] + x @ theta[1:]
    return x @ theta


class IntervalMeanModel(MomentModel):
    """Interval regression on the mean: m = (W^H - x~'theta, x~'theta - W^L).

    ``wl_col``/``wh_col`` bind columns of ``w`` to the interval endpoints;
    when ``intercept`` is set, theta = (intercept, slopes...).  Rows with
    infinite endpoints violate the a.s. bound and are rejected.
    """

    d_y = 2

    def __init__(self, d: int, wl_col: int = 0, wh_col: int = 1,
                 intercept: bool = True, bound: float = np.inf):
        self.d = d
        self.wl_col = wl_col
        self.wh_col = wh_col
        self.intercept = intercept
        self.n_params = d + 1 if intercept else d
        self.bound = bound

    def evaluate_matrix(self, w, x, theta):
        theta = self._check_theta(theta)
        wl = w[:, self.wl_col]
        wh = w[:, self.wh_col]
        if not (np.isfinite(wl).all() and np.isfinite(wh).all()):
            raise ModelError(
                "interval mean model requires finite endpoints; "
                "infinite endpoints violate the moment bound"
            )
        idx = _linear_index(x, theta, self.intercept)
        m = np.column_stack([wh - idx, idx - wl])
        if np.isfinite(self.bound) and np.abs(m).max(initial=0.0) > self.bound:
            raise ModelError("moment value exceeds the declared bound")
        return m


class IntervalMedianModel(MomentModel):
    """Interval regression on the median:
    m = (1{x~'theta <= W^H} - 1/2, 1/2 - 1{x~'theta <= W^L}).

    Indicators evaluate naturally for infinite endpoints (1{c <= +inf} = 1),
    so rows with missing interval information are allowed.  |m_j| <= 1/2.
    """

    d_y = 2
    bound = 0.5

    def __init__(self, d: int, wl_col: int = 0, wh_col: int = 1, intercept: bool = True):
        self.d = d
        self.wl_col = wl_col
        self.wh_col = wh_col
        self.intercept = intercept
        self.n_params = d + 1 if intercept else d

    def evaluate_matrix(self, w, x, theta):
        theta = self._check_theta(theta)
        idx = _linear_index(x, theta, self.intercept)
        upper = (idx <= w[:, self.wh_col]).astype(float) - 0.5
        lower = 0.5 - (idx <= w[:, self.wl_col]).astype(float)
        return np.column_stack([upper, lower])


class CallbackModel(MomentModel):
    """User-supplied moment model from a vectorized callback.

    ``fn(w, x, theta)`` must return an (n, d_y) array, be deterministic and
    respect ``bound``.
    """

    def __init__(self, fn: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray],
                 d_y: int, n_params: int, bound: float = np.inf):
        self.fn = fn
        self.d_y = d_y
        self.n_params = n_params
        self.bound = bound

    def evaluate_matrix(self, w, x, theta):
        theta = self._check_theta(theta)
        m = np.asarray(self.fn(w, x, theta), dtype=float)
        if m.ndim == 1:
            m = m[:, None]
        if m.shape != (w.shape[0], self.d_y):
            raise ModelError(
                f"callback returned shape {m.shape}, expected {(w.shape[0], self.d_y)}"
            )
        return m


@dataclass(frozen=True)
class Aggregator:
    """Nonnegative, positively homogeneous map from moment vectors to scalars.

    kind = "neg-sup-norm" (default): S(v) = max_k |min(v_k, 0)|.
    kind = "neg-p-norm": S(v) = (sum_k |min(v_k, 0)|^p)^(1/p).

    Either way S(a v) = a S(v) for a >= 0 and S(v) = 0 iff v >= 0.
    """

    kind: str = "neg-sup-norm"
    p: float = 2.0

    def __post_init__(self):
        if self.kind not in ("neg-sup-norm", "neg-p-norm"):
            raise ModelError(f"unknown aggregator kind {self.kind!r}")
        if self.kind == "neg-p-norm" and not self.p >= 1:
            raise ModelError("p-norm aggregator requires p >= 1")

    def __call__(self, v) -> float:
        v = np.asarray(v, dtype=float)
        neg = np.minimum(v, 0.0)
        if self.kind == "neg-sup-norm":
            return float(np.abs(neg).max(initial=0.0))
        return float(np.sum(np.abs(neg) ** self.p) ** (1.0 / self.p))

    def rowwise(self, mat: np.ndarray) -> np.ndarray:
        """Apply S to each row of an (n, d_y) array."""
        mat = np.atleast_2d(np.asarray(mat, dtype=float))
        neg = np.abs(np.minimum(mat, 0.0))
        if self.kind == "neg-sup-norm":
            return neg.max(axis=1)
        return np.sum(neg ** self.p, axis=1) ** (1.0 / self.p)


def evaluate_moments(model: MomentModel, data: Dataset, theta) -> np.ndarray:
    """Evaluate the moment model on every row; returns an (n, d_y) array."""
    theta = np.asarray(theta, dtype=float).ravel()
    return model.evaluate_matrix(data.w, data.x, theta)


def aggregate(s: Aggregator, v) -> float:
    """Apply the aggregator to one moment vector."""
    v = np.asarray(v, dtype=float)
    if not np.isfinite(v).all():
        raise ModelError("aggregate requires finite input")
    return s(v)


def load_interval_csv(path, x_cols: Sequence[str], wl_col: str = "wl",
                      wh_col: str = "wh") -> Dataset:
    """Read an interval-outcome dataset from a headered CSV file.

    ``x_cols`` name the conditioning columns in order; ``wl_col``/``wh_col``
    name the interval endpoints.  An empty cell in the lower (upper) endpoint
    column is read as -inf (+inf), encoding a row with no information on
    that side.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ModelError(f"{path}: empty file")
        missing = [c for c in [*x_cols, wl_col, wh_col] if c not in reader.fieldnames]
        if missing:
            raise ModelError(f"{path}: missing columns {missing}")
        xs, ws = [], []
        for i, row in enumerate(reader):
            try:
                xs.append([float(row[c]) for c in x_cols])
            except ValueError as exc:
                raise ModelError(f"{path}: bad x value on data row {i + 1}: {exc}")
            lo_raw = (row[wl_col] or "").strip()
            hi_raw = (row[wh_col] or "").strip()
            lo = -math.inf if lo_raw == "" else float(lo_raw)
            hi = math.inf if hi_raw == "" else float(hi_raw)
            ws.append([lo, hi])
    if not xs:
        raise ModelError(f"{path}: no data rows")
    return Dataset(x=np.array(xs), w=np.array(ws))
