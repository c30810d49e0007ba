"""Local quadratic regression, contact-set estimation, and the
second-derivative pre-test.

The conditional mean of each moment component is fitted by a local second
order polynomial.  Grid points whose fitted mean comes within a vanishing
threshold of the minimum form the estimated contact set; a ball cover turns
those sets into discrete contact points with active component indices, and
the pre-test checks that the fitted Hessian determinant stays away from zero
on the contact set.  Passing supports the fast-rate quadratic-tangency
asymptotics; failing routes inference to the conservative branch.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .limitsim import ContactPointParams
from .models import Aggregator, Dataset, MomentModel, evaluate_moments

__all__ = [
    "KernelSpec",
    "LocalFit",
    "ContactSetEstimate",
    "PretestPlan",
    "SingularFitError",
    "local_quadratic_fit",
    "default_bandwidth",
    "region_grid",
    "estimate_contact_set",
    "discretize_contact_points",
    "hessian_pretest",
    "run_pretest",
    "contact_point_params",
    "kernel_density",
]

_KERNEL_PROFILES = {
    # normalized to integrate to one on [-1, 1]
    "epanechnikov": lambda u: 0.75 * (1.0 - u ** 2),
    "biweight": lambda u: (15.0 / 16.0) * (1.0 - u ** 2) ** 2,
    "triweight": lambda u: (35.0 / 32.0) * (1.0 - u ** 2) ** 3,
}


@dataclass(frozen=True)
class KernelSpec:
    """Compactly supported product kernel on [-1, 1]^d."""

    kind: str = "biweight"

    def __post_init__(self):
        if self.kind not in _KERNEL_PROFILES:
            raise ValueError(f"unknown kernel {self.kind!r}; "
                             f"choose from {sorted(_KERNEL_PROFILES)}")

    def weights(self, u: np.ndarray) -> np.ndarray:
        """Product kernel weights for scaled offsets u of shape (n, d)."""
        u = np.atleast_2d(np.asarray(u, dtype=float))
        profile = _KERNEL_PROFILES[self.kind]
        inside = (np.abs(u) <= 1.0).all(axis=1)
        w = np.zeros(u.shape[0])
        if inside.any():
            w[inside] = np.prod(profile(u[inside]), axis=1)
        return w


class SingularFitError(RuntimeError):
    """Local fit design was rank deficient; carries the usable point count."""

    def __init__(self, message: str, effective_n: int):
        super().__init__(message)
        self.effective_n = effective_n


@dataclass(frozen=True)
class LocalFit:
    """Local quadratic fit at x0: level, gradient, and Hessian estimate."""

    m_hat: float
    grad: np.ndarray
    v_hat: np.ndarray
    x0: np.ndarray
    h: float
    effective_n: int


def default_bandwidth(n: int, d: int = 1) -> float:
    """(log n / n)^(1/(d+6)), balancing variance and bias for both the
    conditional mean and its second derivatives."""
    if n < 2:
        raise ValueError("bandwidth rule needs n >= 2")
    return (math.log(n) / n) ** (1.0 / (d + 6))


def _quad_design(dx: np.ndarray) -> np.ndarray:
    """Columns: 1, dx_i, 0.5*dx_i^2, dx_i*dx_j (i<j).  The 0.5 on the pure
    squares makes the quadratic coefficients the Hessian entries directly."""
    n, d = dx.shape
    cols = [np.ones(n)]
    cols.extend(dx[:, i] for i in range(d))
    cols.extend(0.5 * dx[:, i] ** 2 for i in range(d))
    for i in range(d):
        for j in range(i + 1, d):
            cols.append(dx[:, i] * dx[:, j])
    return np.column_stack(cols)


def local_quadratic_fit(x: np.ndarray, yj: np.ndarray, x0, h: float,
                        kernel: KernelSpec = KernelSpec()) -> LocalFit:
    """Weighted least squares of yj on a quadratic in (x - x0).

    Weights are kernel((x - x0)/h); points outside the kernel support never
    influence the fit.  Raises SingularFitError when the weighted design is
    rank deficient.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] != np.size(yj):
        raise ValueError("x and yj disagree in length")
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    yj = np.asarray(yj, dtype=float).ravel()
    x0 = np.asarray(x0, dtype=float).ravel()
    d = x.shape[1]
    w = kernel.weights((x - x0) / h)
    active = w > 0
    eff = int(active.sum())
    p = 1 + d + d * (d + 1) // 2
    if eff < p:
        raise SingularFitError(
            f"only {eff} points carry weight at x0={x0}; need {p}", eff)
    dx = x[active] - x0
    X = _quad_design(dx)
    wa = w[active]
    A = X.T @ (X * wa[:, None])
    b = X.T @ (wa * yj[active])
    try:
        coef = scipy.linalg.solve(A, b, assume_a="pos")
    except (scipy.linalg.LinAlgError, ValueError):
        raise SingularFitError(f"singular local design at x0={x0}", eff)
    grad = coef[1:1 + d]
    v = np.zeros((d, d))
    v[np.diag_indices(d)] = coef[1 + d:1 + 2 * d]
    k = 1 + 2 * d
    for i in range(d):
        for j in range(i + 1, d):
            v[i, j] = v[j, i] = coef[k]
            k += 1
    return LocalFit(m_hat=float(coef[0]), grad=grad, v_hat=v,
                    x0=x0, h=h, effective_n=eff)


def kernel_density(x: np.ndarray, x0, h: float,
                   kernel: KernelSpec = KernelSpec()) -> float:
    """Product-kernel density estimate at x0."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    x0 = np.asarray(x0, dtype=float).ravel()
    w = kernel.weights((x - x0) / h)
    return float(w.mean() / h ** x.shape[1])


@dataclass(frozen=True)
class PretestPlan:
    """Thresholds and grid for contact-set and Hessian pre-tests.

    The contact threshold is max(a_n * sqrt(log n/(n h^d)), h^3) and the
    Hessian threshold is b_n * max(sqrt(log n/(n h^(d+4))), h), with
    a_n = a_scale*sqrt(log n) and b_n = b_scale*sqrt(log n).  The scales are
    calibrated so that at desk sample sizes a genuine quadratic tangency
    passes while a flat (positive-probability) contact fails; any slowly
    diverging choice is admissible asymptotically.
    """

    a_scale: float = 0.35
    b_scale: float = 1.5
    grid_points: int = 201
    trim: float = 0.01
    kernel: KernelSpec = field(default_factory=KernelSpec)

    def a_n(self, n: int) -> float:
        return self.a_scale * math.sqrt(math.log(n))

    def b_n(self, n: int) -> float:
        return self.b_scale * math.sqrt(math.log(n))

    def contact_threshold(self, n: int, h: float, d: int) -> float:
        return max(self.a_n(n) * math.sqrt(math.log(n) / (n * h ** d)), h ** 3)

    def hessian_threshold(self, n: int, h: float, d: int) -> float:
        return self.b_n(n) * max(math.sqrt(math.log(n) / (n * h ** (d + 4))), h)

    def epsilon_n(self, n: int, h: float, d: int) -> float:
        # shrinks strictly slower than sqrt(contact threshold)
        return self.contact_threshold(n, h, d) ** 0.25


def region_grid(data: Dataset, points_per_dim: int = 201,
                trim: float = 0.01) -> np.ndarray:
    """Search grid over the bounding box of the central mass of each
    coordinate (density must stay away from zero on it)."""
    axes = []
    for k in range(data.d):
        lo = np.quantile(data.x[:, k], trim)
        hi = np.quantile(data.x[:, k], 1 - trim)
        axes.append(np.linspace(lo, hi, points_per_dim))
    if data.d == 1:
        return axes[0][:, None]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


@dataclass
class ContactSetEstimate:
    """Discretized contact points with active component sets.

    grids[j] holds the grid points flagged for component j; ``points`` are
    the merged representatives, pairwise more than 2*epsilon_n apart, and
    active_sets[r] lists the components binding at points[r].
    """

    grids: dict
    points: list
    active_sets: list
    epsilon_n: float
    thresholds: dict

    def to_dict(self) -> dict:
        return {
            "points": [p.tolist() for p in self.points],
            "active_sets": [sorted(a) for a in self.active_sets],
            "epsilon_n": self.epsilon_n,
            "thresholds": self.thresholds,
            "grids": {str(j): g.tolist() for j, g in self.grids.items()},
        }


def estimate_contact_set(model: MomentModel, data: Dataset, theta, j: int,
                         region: np.ndarray, h: float,
                         kernel: KernelSpec = KernelSpec(),
                         a_n: float | None = None,
                         plan: PretestPlan | None = None):
    """Grid points where the fitted conditional mean of component j is
    within the vanishing threshold of its (nonpositive part of the) minimum.

    Returns (selected points array, fits at all grid points or None where
    singular, skipped count).  Empty when the moment is slack everywhere.
    """
    plan = plan or PretestPlan(kernel=kernel)
    region = np.atleast_2d(np.asarray(region, dtype=float))
    if region.shape[0] == 0:
        raise ValueError("empty search region")
    m = evaluate_moments(model, data, theta)[:, j]
    n, d = data.n, data.d
    fits: list = []
    skipped = 0
    for g in region:
        try:
            fits.append(local_quadratic_fit(data.x, m, g, h, kernel))
        except SingularFitError:
            fits.append(None)
            skipped += 1
    mh = np.array([f.m_hat if f is not None else np.nan for f in fits])
    if np.isnan(mh).all():
        raise SingularFitError("every grid fit was singular", 0)
    thr = plan.contact_threshold(n, h, d) if a_n is None else max(
        a_n * math.sqrt(math.log(n) / (n * h ** d)), h ** 3)
    cutoff = min(np.nanmin(mh), 0.0) + thr
    sel = np.flatnonzero(mh <= cutoff)
    return region[sel], fits, skipped


def _greedy_cover_1d(points: np.ndarray, eps: float) -> list:
    """Midpoints of maximal runs of width <= 2*eps (optimal 1-d cover)."""
    pts = np.sort(points.ravel())
    centers = []
    i = 0
    while i < pts.size:
        j = int(np.searchsorted(pts, pts[i] + 2 * eps, side="right")) - 1
        centers.append(np.array([(pts[i] + pts[j]) / 2.0]))
        i = j + 1
    return centers

def _greedy_cover(points: np.ndarray, eps: float) -> list:
    """Greedy ball cover after canonical (lexicographic) ordering, so the
    result does not depend on input order.  Coverage, not minimality, is
    what the downstream consistency argument needs."""
    pts = np.atleast_2d(points)
    if pts.shape[1] == 1:
        return _greedy_cover_1d(pts, eps)
    order = np.lexsort(pts.T[::-1])
    pts = pts[order]
    centers = []
    covered = np.zeros(pts.shape[0], dtype=bool)
    for i in range(pts.shape[0]):
        if covered[i]:
            continue
        c = pts[i]
        centers.append(c.copy())
        covered |= np.linalg.norm(pts - c, axis=1) <= eps
    return centers


def discretize_contact_points(sets: dict, epsilon_n: float,
                              thresholds: dict | None = None) -> ContactSetEstimate:
    """Merge per-component contact grids into discrete contact points.

    Each component's grid is covered by epsilon_n-balls; centers whose balls
    chain (pairwise distance <= 2*epsilon_n, transitively, across
    components) collapse to one contact point carrying the union of the
    component indices.  Deterministic and invariant to input ordering.
    """
    if epsilon_n <= 0:
        raise ValueError("epsilon_n must be positive")
    labeled = []  # (component j, center)
    for j in sorted(sets):
        pts = np.atleast_2d(np.asarray(sets[j], dtype=float))
        if pts.size == 0:
            continue
        for c in _greedy_cover(pts, epsilon_n):
            labeled.append((j, np.asarray(c, dtype=float).ravel()))
    if not labeled:
        return ContactSetEstimate(grids={j: np.atleast_2d(np.asarray(v, float))
                                         for j, v in sets.items()},
                                  points=[], active_sets=[],
                                  epsilon_n=epsilon_n, thresholds=thresholds or {})
    # union-find over chained ball intersections
    parent = list(range(len(labeled)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a in range(len(labeled)):
        for b in range(a + 1, len(labeled)):
            if np.linalg.norm(labeled[a][1] - labeled[b][1]) <= 2 * epsilon_n:
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[rb] = ra
    classes: dict = {}
    for idx in range(len(labeled)):
        classes.setdefault(find(idx), []).append(idx)
    points, active = [], []
    for members in classes.values():
        centers = np.array([labeled[i][1] for i in members])
        rep = centers[np.lexsort(centers.T[::-1])][0]  # canonical member
        points.append(rep)
        active.append(sorted({labeled[i][0] for i in members}))
    order = np.lexsort(np.array([p for p in points]).T[::-1])
    points = [points[i] for i in order]
    active = [active[i] for i in order]
    return ContactSetEstimate(
        grids={j: np.atleast_2d(np.asarray(v, float)) for j, v in sets.items()},
        points=points, active_sets=active,
        epsilon_n=epsilon_n, thresholds=thresholds or {})


def hessian_pretest(estimate: ContactSetEstimate, fits_by_component: dict,
                    b_n: float, h: float, n: int):
    """Determinant pre-test: component j passes when the fitted Hessian
    determinant stays above b_n * max(sqrt(log n/(n h^(d+4))), h) on its
    contact grid.  An empty grid passes vacuously (slack moment)."""
    out = {}
    for j, grid in estimate.grids.items():
        fits = fits_by_component.get(j, [])
        d = grid.shape[1] if grid.size else 1
        thr = b_n * max(math.sqrt(math.log(n) / (n * h ** (d + 4))), h)
        if grid.size == 0 or not fits:
            out[j] = {"pass": True, "margin": math.inf, "threshold": thr}
            continue
        dets = [np.linalg.det(f.v_hat) for f in fits if f is not None]
        if not dets:
            raise SingularFitError(f"no usable Hessian fits for component {j}", 0)
        inf_det = float(min(dets))
        out[j] = {"pass": bool(inf_det > thr), "margin": inf_det - thr,
                  "threshold": thr, "inf_det": inf_det}
    return out


def run_pretest(model: MomentModel, data: Dataset, theta, h: float | None = None,
                plan: PretestPlan = PretestPlan()):
    """Full pre-test pipeline over all moment components.

    Fits every component on the search grid, estimates contact sets,
    discretizes them into contact points, and runs the Hessian test.
    Returns a JSON-serializable report dict.
    """
    h = h if h is not None else default_bandwidth(data.n, data.d)
    region = region_grid(data, plan.grid_points, plan.trim)
    n, d = data.n, data.d
    sets, fit_lists, skipped = {}, {}, {}
    for j in range(model.d_y):
        pts, fits, skip = estimate_contact_set(
            model, data, theta, j, region, h, plan.kernel, plan=plan)
        sets[j] = pts
        skipped[j] = skip
        sel_mask = {tuple(p) for p in np.atleast_2d(pts)}
        fit_lists[j] = [f for g, f in zip(region, fits)
                        if f is not None and tuple(g) in sel_mask]
    eps = plan.epsilon_n(n, h, d)
    thresholds = {
        "contact": plan.contact_threshold(n, h, d),
        "hessian": plan.hessian_threshold(n, h, d),
        "a_n": plan.a_n(n), "b_n": plan.b_n(n), "h": h, "epsilon_n": eps,
    }
    estimate = discretize_contact_points(sets, eps, thresholds)
    hess = hessian_pretest(estimate, fit_lists, plan.b_n(n), h, n)
    boundary_warnings = []
    for p in estimate.points:
        for k in range(d):
            lo, hi = region[:, k].min(), region[:, k].max()
            if p[k] - lo < h or hi - p[k] < h:
                boundary_warnings.append(
                    f"contact point {p.tolist()} lies within one bandwidth "
                    f"of the search region boundary on axis {k}")
    return {
        "estimate": estimate,
        "hessian": hess,
        "fits": fit_lists,
        "thresholds": thresholds,
        "skipped": skipped,
        "all_pass": all(v["pass"] for v in hess.values()),
        "boundary_warnings": boundary_warnings,
    }


def pretest_report_json(report: dict) -> str:
    """Serialize a run_pretest report (drops the raw fit objects)."""
    payload = {
        "contact_points": report["estimate"].to_dict(),
        "hessian": {str(j): {k: (None if isinstance(v, float) and math.isinf(v)
                                 else v)
                             for k, v in row.items()}
                    for j, row in report["hessian"].items()},
        "thresholds": report["thresholds"],
        "skipped": {str(j): v for j, v in report["skipped"].items()},
        "all_pass": report["all_pass"],
        "boundary_warnings": report["boundary_warnings"],
    }
    return json.dumps(payload, indent=2)


def contact_point_params(model: MomentModel, data: Dataset, theta,
                         report: dict, h: float | None = None,
                         kernel: KernelSpec = KernelSpec()) -> list:
    """Plug-in parameters at each estimated contact point: density, active
    conditional second-moment matrix, and per-component Hessians, packaged
    for simulation of the limit law."""
    h = h if h is not None else default_bandwidth(data.n, data.d)
    m = evaluate_moments(model, data, theta)
    est: ContactSetEstimate = report["estimate"]
    out = []
    for point, active in zip(est.points, est.active_sets):
        f_hat = kernel_density(data.x, point, h, kernel)
        w = kernel.weights((data.x - point) / h)
        sub = m[:, active]
        m2 = (sub * w[:, None]).T @ sub / w.sum()
        m2 = 0.5 * (m2 + m2.T)
        v_hats = []
        for j in active:
            fit = local_quadratic_fit(data.x, m[:, j], point, h, kernel)
            v_hats.append(fit.v_hat)
        out.append(ContactPointParams(
            x_k=np.asarray(point, dtype=float),
            f_hat=f_hat, m2_hat=m2, v_hats=tuple(v_hats),
            active=tuple(active)))
    return out
