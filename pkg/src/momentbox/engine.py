"""Exact computation of box-indexed infimum statistics.

The statistic for component j is

    T_n,j(theta) = inf over boxes (s, t) of  E_n[ m_j(W_i, theta) 1{s < X_i < s + t} ]

with the infimum taken over all axis-aligned open boxes.  The empirical
objective is piecewise constant in (s, t) and attained at boxes whose faces
pass through data coordinates, so the infimum equals the minimum over
data-defined closed boxes (including the empty box, which contributes 0).
In one dimension that is a minimum-sum contiguous run of the x-sorted
order; in higher dimensions we enumerate closed coordinate intervals on the
leading axes and scan the last axis as a 1-d run.

Points with tied coordinates cannot be separated by any box in that
coordinate and are treated as atomic blocks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .models import Aggregator, Dataset, MomentModel, evaluate_moments

__all__ = [
    "Box",
    "KSResult",
    "min_interval_1d",
    "min_box_exact",
    "ks_statistic",
    "scaled_statistic",
    "evaluate_box",
    "EngineSizeError",
]

BOX_CAP_DEFAULT = 400


class EngineInputError(ValueError):
    """Malformed engine input (length mismatch, unsorted x, bad beta)."""


class EngineSizeError(ValueError):
    """Exact enumeration refused: instance exceeds the configured cap."""


@dataclass(frozen=True)
class Box:
    """Open axis-aligned box {x : s < x < s + t}, t >= 0 componentwise."""

    s: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float).ravel()
        t = np.asarray(self.t, dtype=float).ravel()
        if s.shape != t.shape:
            raise EngineInputError("box corner and edge vectors differ in length")
        if (t < 0).any():
            raise EngineInputError("box edge lengths must be nonnegative")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "t", t)

    @property
    def is_empty(self) -> bool:
        return bool((self.t == 0).any())

    def contains(self, x: np.ndarray) -> np.ndarray:
        """Strict membership mask for rows of x."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.all((x > self.s) & (x < self.s + self.t), axis=1)

    def to_dict(self) -> dict:
        return {"s": self.s.tolist(), "t": self.t.tolist()}

    @classmethod
    def empty(cls, d: int) -> "Box":
        return cls(s=np.zeros(d), t=np.zeros(d))


@dataclass(frozen=True)
class KSResult:
    """Componentwise box infima with witnesses.

    inf_values : (d_y,) array, each entry <= 0 (the empty box attains 0).
    argmin_boxes : one Box per component reproducing its infimum.
    n : sample size used in the empirical means.
    scaling_exponent : rate exponent attached for reporting.
    """

    inf_values: np.ndarray
    argmin_boxes: tuple
    n: int
    scaling_exponent: float

    def to_json(self) -> str:
        return json.dumps({
            "inf_values": np.asarray(self.inf_values).tolist(),
            "argmin_boxes": [b.to_dict() for b in self.argmin_boxes],
            "n": self.n,
            "scaling_exponent": self.scaling_exponent,
        })


def _group_ties(x: np.ndarray, y: np.ndarray):
    """Collapse consecutive equal x values into blocks; returns
    (block sums of y, first index of each block, last index of each block)."""
    n = x.size
    new_block = np.empty(n, dtype=bool)
    new_block[0] = True
    new_block[1:] = x[1:] != x[:-1]
    starts = np.flatnonzero(new_block)
    ends = np.append(starts[1:], n) - 1
    sums = np.add.reduceat(y, starts)
    return sums, starts, ends


def _min_block_run(sums: np.ndarray):
    """Minimum-sum contiguous run of block sums.

    Returns (min_sum, i, j) over nonempty runs [i..j] of blocks.  Uses
    prefix sums with a running maximum; O(B).
    """
    prefix = np.concatenate(([0.0], np.cumsum(sums)))
    # best run ending at block k has sum prefix[k+1] - max_{i<=k} prefix[i]
    run_max = np.maximum.accumulate(prefix[:-1])
    cand = prefix[1:] - run_max
    end = int(np.argmin(cand))
    value = float(cand[end])
    start = int(np.argmax(prefix[: end + 1] == run_max[end]))
    return value, start, end


def _interval_box(x_sorted: np.ndarray, lo_idx: int, hi_idx: int):
    """Strict 1-d interval containing exactly points lo_idx..hi_idx:
    midpoints to the neighbouring data values, +/-1 beyond the range."""
    lo = x_sorted[lo_idx - 1: lo_idx + 1].mean() if lo_idx > 0 else x_sorted[0] - 1.0
    hi = (x_sorted[hi_idx: hi_idx + 2].mean()
          if hi_idx < x_sorted.size - 1 else x_sorted[-1] + 1.0)
    return lo, hi


def min_interval_1d(x, y):
    """Exact infimum of E_n[y 1{s < x < s+t}] over intervals, with witness.

    Parameters
    ----------
    x : sorted 1-d array (ties allowed, treated as inseparable blocks).
    y : values aligned with x.

    Returns
    -------
    (value, box) : value = min(0, min contiguous block sum / n); the box
    strictly contains exactly the minimizing points, or is empty when no
    run has negative sum.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size:
        raise EngineInputError(f"length mismatch: {x.size} vs {y.size}")
    if x.size == 0:
        raise EngineInputError("empty input")
    if (np.diff(x) < 0).any():
        raise EngineInputError("x must be sorted ascending")
    sums, starts, ends = _group_ties(x, y)
    best, bi, bj = _min_block_run(sums)
    if best >= 0:
        return 0.0, Box.empty(1)
    lo, hi = _interval_box(x, starts[bi], ends[bj])
    return best / x.size, Box(s=[lo], t=[hi - lo])


def _min_box_recursive(x, y, order_last, axis, mask):
    """Minimum block sum over closed boxes of the masked points.

    Recursion over axes 0..d-2 picks closed intervals of unique coordinate
    values; the final axis is scanned as a contiguous run (in the globally
    sorted last-axis order, which any mask preserves).  Returns
    (min_sum, witness) where witness is a list of per-axis closed index
    intervals into the data; None when the mask is empty.
    """
    d = x.shape[1]
    if axis == d - 1:
        idx = order_last[mask[order_last]]
        if idx.size == 0:
            return None
        xl = x[idx, -1]
        sums, starts, ends = _group_ties(xl, y[idx])
        val, bi, bj = _min_block_run(sums)
        return val, [(xl[starts[bi]], xl[ends[bj]])], idx
    vals = x[mask, axis]
    if vals.size == 0:
        return None
    u = np.unique(vals)
    best = None
    col = x[:, axis]
    for i in range(u.size):
        ge = mask & (col >= u[i])
        for j in range(i, u.size):
            sub = ge & (col <= u[j])
            res = _min_box_recursive(x, y, order_last, axis + 1, sub)
            if res is None:
                continue
            val, witness, idx = res
            if best is None or val < best[0]:
                best = (val, [(u[i], u[j])] + witness, idx)
    return best


def _strict_box_from_closed(x, closed):
    """Convert per-axis closed value intervals into a strict Box using
    midpoints to the nearest outside data value (+/-1 at the extremes)."""
    s = []
    t = []
    for axis, (lo_v, hi_v) in enumerate(closed):
        col = np.unique(x[:, axis])
        li = np.searchsorted(col, lo_v)
        hi = np.searchsorted(col, hi_v)
        lo = (col[li - 1] + col[li]) / 2 if li > 0 else col[0] - 1.0
        up = (col[hi] + col[hi + 1]) / 2 if hi < col.size - 1 else col[-1] + 1.0
        s.append(lo)
        t.append(up - lo)
    return Box(s=s, t=t)


def min_box_exact(x, y, cap: int = BOX_CAP_DEFAULT):
    """Exact infimum of E_n[y 1{box}] over axis-aligned boxes, any d.

    Enumerates closed boxes with faces through data coordinates; exact and
    equal to `min_interval_1d` when d = 1.  Refuses instances with
    n > cap when d >= 2 (the enumeration is O(n^(2(d-1)) * n)).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if x.shape[0] != y.size:
        raise EngineInputError(f"length mismatch: {x.shape[0]} vs {y.size}")
    n, d = x.shape
    if d == 1:
        order = np.argsort(x[:, 0], kind="stable")
        return min_interval_1d(x[order, 0], y[order])
    if n > cap:
        raise EngineSizeError(
            f"n={n} exceeds the exact-enumeration cap {cap} for d={d}; "
            "subsample the data or raise the cap"
        )
    order_last = np.argsort(x[:, -1], kind="stable")
    res = _min_box_recursive(x, y, order_last, 0, np.ones(n, dtype=bool))
    val, witness, _ = res
    if val >= 0:
        return 0.0, Box.empty(d)
    return val / n, _strict_box_from_closed(x, witness)


def ks_statistic(model: MomentModel, data: Dataset, theta,
                 cap: int = BOX_CAP_DEFAULT) -> KSResult:
    """Componentwise exact box-infimum statistic for a model at theta."""
    m = evaluate_moments(model, data, theta)
    n, d = data.n, data.d
    infs = np.empty(model.d_y)
    boxes = []
    if d == 1:
        order = np.argsort(data.x[:, 0], kind="stable")
        xs = data.x[order, 0]
        for j in range(model.d_y):
            infs[j], box = min_interval_1d(xs, m[order, j])
            boxes.append(box)
    else:
        for j in range(model.d_y):
            infs[j], box = min_box_exact(data.x, m[:, j], cap=cap)
            boxes.append(box)
    return KSResult(
        inf_values=infs,
        argmin_boxes=tuple(boxes),
        n=n,
        scaling_exponent=(d + 2) / (d + 4),
    )


def evaluate_box(data: Dataset, moments: np.ndarray, j: int, box: Box) -> float:
    """Re-evaluate E_n[m_j 1{box}]; reproduces the stored infimum exactly."""
    mask = box.contains(data.x)
    return float(moments[mask, j].sum() / data.n)


def scaled_statistic(result: KSResult, s: Aggregator, beta: float) -> float:
    """n^beta * S(inf_values)."""
    if not 0.0 <= beta <= 1.0:
        raise EngineInputError(f"beta must lie in [0, 1], got {beta}")
    return float(result.n ** beta * s(result.inf_values))


# ---------------------------------------------------------------------------
# Vectorized fast path shared with the resampling machinery.

def min_run_means_rows(y_rows: np.ndarray) -> np.ndarray:
    """Per-row min(0, minimum contiguous-run sum) / b for an already
    x-ordered (draws, b) matrix with no ties.  O(draws * b)."""
    draws, b = y_rows.shape
    prefix = np.concatenate([np.zeros((draws, 1)), np.cumsum(y_rows, axis=1)], axis=1)
    run_max = np.maximum.accumulate(prefix[:, :-1], axis=1)
    best = (prefix[:, 1:] - run_max).min(axis=1)
    return np.minimum(best, 0.0) / b
