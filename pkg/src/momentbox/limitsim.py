"""Simulation of the nonstandard limit law of the box-infimum statistic.

At each contact point the scaled statistic converges to

    Z_j = min over contact points k activating j of
          inf over boxes (s, t) of  G_k,j(s, t) + g_k,j(s, t)

where G_k is a set-indexed Gaussian field with
cov(G(b1), G(b2)) = M f * vol(b1 and b2) (M the conditional second-moment
matrix of the active components, f the density) and g is the deterministic
drift: for quadratic tangency, g_j(box) = f/2 * integral over the box of
x'V_j x dx, in closed form; a local alternative adds a term linear in the
box volume.  The field is realized exactly on a grid as cellwise white
noise aggregated by prefix sums, so grid-aligned boxes have exactly the
required covariance.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.integrate
import scipy.optimize

from .models import Aggregator

__all__ = [
    "ContactPointParams",
    "ZSimConfig",
    "GaussianField",
    "drift_integral",
    "simulate_gaussian_field",
    "simulate_Z",
    "z_quantile",
    "drift_infimum",
    "refinement_diagnostic",
    "ParameterError",
    "UnsupportedFeatureError",
]

PSD_CLIP_REL_TOL = 1e-8


class ParameterError(ValueError):
    """Invalid plug-in parameters (non-PSD second moment, bad shapes)."""


class UnsupportedFeatureError(NotImplementedError):
    """Requested a feature outside the supported scope (anisotropic drift)."""


@dataclass(frozen=True)
class ContactPointParams:
    """Plug-in inputs at one contact point.

    x_k : location (d,)
    f_hat : density at x_k, > 0
    m2_hat : (|active|, |active|) conditional second-moment matrix
    v_hats : per active component, (d, d) Hessian of the conditional mean
             (used when gamma == 2)
    active : indices of the moment components binding at x_k
    gamma : local growth order of the conditional mean (2 = quadratic)
    psi_scale : per active component, isotropic drift constant for
                gamma != 2 (drift = f * psi * integral of |x|^gamma)
    linear_shift : per active component, local-alternative drift slope
                   (already multiplied by the density); adds
                   shift * prod(t) to the drift
    """

    x_k: np.ndarray
    f_hat: float
    m2_hat: np.ndarray
    v_hats: tuple = ()
    active: tuple = (0,)
    gamma: float = 2.0
    psi_scale: tuple | None = None
    linear_shift: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "x_k", np.asarray(self.x_k, dtype=float).ravel())
        m2 = np.atleast_2d(np.asarray(self.m2_hat, dtype=float))
        if m2.shape[0] != m2.shape[1] or m2.shape[0] != len(self.active):
            raise ParameterError("m2_hat must be square with one row per active component")
        if not np.allclose(m2, m2.T, atol=1e-10):
            raise ParameterError("m2_hat must be symmetric")
        object.__setattr__(self, "m2_hat", 0.5 * (m2 + m2.T))
        if not self.f_hat > 0:
            raise ParameterError("density estimate must be positive")
        if self.gamma == 2.0:
            if len(self.v_hats) != len(self.active):
                raise ParameterError("need one Hessian per active component")
            vs = []
            for v in self.v_hats:
                v = np.atleast_2d(np.asarray(v, dtype=float))
                if not np.allclose(v, v.T, atol=1e-8):
                    raise ParameterError("Hessian estimates must be symmetric")
                vs.append(0.5 * (v + v.T))
            object.__setattr__(self, "v_hats", tuple(vs))
        else:
            if self.psi_scale is None or len(self.psi_scale) != len(self.active):
                raise ParameterError(
                    "gamma != 2 needs an isotropic psi constant per active component")
            if any(not np.isscalar(p) or p <= 0 for p in self.psi_scale):
                raise UnsupportedFeatureError(
                    "only constant (isotropic) positive drift scales are supported")
        if self.linear_shift is not None and len(self.linear_shift) != len(self.active):
            raise ParameterError("need one linear shift per active component")

    @property
    def d(self) -> int:
        return self.x_k.size

    def to_json(self) -> str:
        return json.dumps({
            "x_k": self.x_k.tolist(),
            "f_hat": self.f_hat,
            "m2_hat": np.asarray(self.m2_hat).tolist(),
            "v_hats": [np.asarray(v).tolist() for v in self.v_hats],
            "active": list(self.active),
            "gamma": self.gamma,
            "psi_scale": None if self.psi_scale is None else list(self.psi_scale),
            "linear_shift": None if self.linear_shift is None else list(self.linear_shift),
        })

    @classmethod
    def from_json(cls, s: str) -> "ContactPointParams":
        d = json.loads(s)
        return cls(x_k=d["x_k"], f_hat=d["f_hat"], m2_hat=d["m2_hat"],
                   v_hats=tuple(np.array(v) for v in d.get("v_hats", [])),
                   active=tuple(d["active"]), gamma=d.get("gamma", 2.0),
                   psi_scale=None if d.get("psi_scale") is None else tuple(d["psi_scale"]),
                   linear_shift=None if d.get("linear_shift") is None else tuple(d["linear_shift"]))


@dataclass(frozen=True)
class ZSimConfig:
    """Grid truncation and draw count for the limit-law simulation.

    Boxes live on the cell lattice over [-B, 2B]^d (lower corners down to
    -B, upper corners up to 2B), which covers every box within radius B of
    the contact point.
    """

    B: float = 10.0
    cells_per_axis: int | None = None
    n_sims: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.B <= 0:
            raise ParameterError("truncation radius must be positive")
        if self.cells_per_axis is not None and self.cells_per_axis < 4:
            raise ParameterError("need at least 4 cells per axis")

    def cells(self, d: int) -> int:
        if self.cells_per_axis is not None:
            return self.cells_per_axis
        return 200 if d == 1 else 40

    def edges(self, d: int) -> np.ndarray:
        return np.linspace(-self.B, 2 * self.B, self.cells(d) + 1)


def _box_arrays(box):
    from .engine import Box
    if isinstance(box, Box):
        return box.s, box.t
    s, t = box
    return np.asarray(s, dtype=float).ravel(), np.asarray(t, dtype=float).ravel()


def drift_integral(point: ContactPointParams, j: int, box) -> float:
    """Deterministic drift of active component j over one box.

    gamma == 2: (f/2) * integral over the box of x'V_j x dx, evaluated in
    closed form from the per-axis monomial integrals; other gamma:
    f * psi_j * integral of |x|^gamma by adaptive quadrature.  A stored
    linear shift adds shift_j * prod(t).
    """
    if j not in point.active:
        raise ParameterError(f"component {j} is not active at this contact point")
    pos = point.active.index(j)
    s, t = _box_arrays(box)
    d = point.d
    if s.size != d:
        raise ParameterError(f"box dimension {s.size} != contact dimension {d}")
    if (t < 0).any():
        raise ParameterError("box edge lengths must be nonnegative")
    if (t == 0).any():
        base = 0.0
    elif point.gamma == 2.0:
        V = point.v_hats[pos]
        i0 = t
        i1 = ((s + t) ** 2 - s ** 2) / 2.0
        i2 = ((s + t) ** 3 - s ** 3) / 3.0
        total = 0.0
        for i in range(d):
            rest = np.prod(np.delete(i0, i))
            total += V[i, i] * i2[i] * rest
        for i in range(d):
            for k in range(i + 1, d):
                rest = np.prod(np.delete(i0, [i, k]))
                total += 2.0 * V[i, k] * i1[i] * i1[k] * rest
        base = 0.5 * point.f_hat * total
    else:
        psi = float(point.psi_scale[pos])
        gamma = point.gamma
        val, _ = scipy.integrate.nquad(
            lambda *x: np.linalg.norm(x) ** gamma,
            [(s[i], s[i] + t[i]) for i in range(d)],
            opts={"epsabs": 1e-10, "epsrel": 1e-10})
        base = point.f_hat * psi * val
    if point.linear_shift is not None:
        base += float(point.linear_shift[pos]) * float(np.prod(t))
    return float(base)


def _field_scale(point: ContactPointParams, vol: float) -> np.ndarray:
    """Cholesky-like factor of m2_hat * f_hat * vol with eigenvalue clipping
    for marginally indefinite plug-in matrices."""
    m2 = point.m2_hat
    vals, vecs = np.linalg.eigh(m2)
    tol = PSD_CLIP_REL_TOL * max(np.trace(m2), 1e-300)
    if vals.min() < -tol:
        raise ParameterError(
            f"m2_hat has eigenvalue {vals.min():.3e} below the PSD clip tolerance")
    vals = np.clip(vals, 0.0, None)
    return vecs * np.sqrt(vals * point.f_hat * vol)


class GaussianField:
    """One realization of the set-indexed field on the cell lattice.

    Cell increments are iid N(0, M f vol(cell)) vectors over the active
    components; values over grid-aligned boxes come from d-dimensional
    prefix sums, so covariances over such boxes are exact by construction
    and the field is finitely additive over disjoint unions.
    """

    def __init__(self, point: ContactPointParams, cfg: ZSimConfig, draw_seed=None):
        d = point.d
        cells = cfg.cells(d)
        self.edges = cfg.edges(d)
        vol = float(np.prod(np.diff(self.edges)[:1]) ** d)
        scale = _field_scale(point, vol)
        rng = np.random.default_rng(cfg.seed if draw_seed is None else draw_seed)
        q = len(point.active)
        z = rng.standard_normal(size=(cells,) * d + (q,))
        incr = z @ scale.T
        self.prefix = incr
        for axis in range(d):
            self.prefix = np.cumsum(self.prefix, axis=axis)
        # zero-pad the lower faces so index 0 means "empty along this axis"
        for axis in range(d):
            shape = list(self.prefix.shape)
            shape[axis] = 1
            self.prefix = np.concatenate([np.zeros(shape), self.prefix], axis=axis)
        self.d = d
        self.active = point.active

    def value(self, lo_idx, hi_idx) -> np.ndarray:
        """Field over the box spanning cell-edge indices lo..hi per axis
        (edge indices into ``edges``), via inclusion-exclusion on the
        prefix array; O(2^d) lookups."""
        lo = np.atleast_1d(np.asarray(lo_idx, dtype=int))
        hi = np.atleast_1d(np.asarray(hi_idx, dtype=int))
        if (hi < lo).any():
            raise ParameterError("box upper index below lower index")
        total = np.zeros(len(self.active))
        for corner in itertools.product(*[(0, 1)] * self.d):
            idx = tuple(hi[k] if corner[k] else lo[k] for k in range(self.d))
            sign = (-1) ** (self.d - sum(corner))
            total = total + sign * self.prefix[idx]
        return total


def simulate_gaussian_field(point: ContactPointParams, cfg: ZSimConfig,
                            draw_seed=None) -> GaussianField:
    """Realize the set-indexed Gaussian field once on the lattice."""
    return GaussianField(point, cfg, draw_seed)


def _drift_matrix_1d(point: ContactPointParams, pos: int, edges: np.ndarray) -> np.ndarray:
    """g over every edge-index pair (a < b), vectorized for d = 1."""
    j = point.active[pos]
    if point.gamma == 2.0:
        V = float(np.atleast_2d(point.v_hats[pos])[0, 0])
        e3 = edges ** 3
        g = 0.5 * point.f_hat * V * (e3[None, :] - e3[:, None]) / 3.0
        if point.linear_shift is not None:
            g = g + float(point.linear_shift[pos]) * (edges[None, :] - edges[:, None])
        return g
    g = np.zeros((edges.size, edges.size))
    for a in range(edges.size):
        for b in range(a + 1, edges.size):
            g[a, b] = drift_integral(point, j,
                                     ([edges[a]], [edges[b] - edges[a]]))
    return g


def _sim_point_1d(point: ContactPointParams, cfg: ZSimConfig, seed) -> np.ndarray:
    """Per-draw infima over all grid boxes for one contact point, d=1.
    Returns (n_sims, |active|)."""
    edges = cfg.edges(1)
    cells = edges.size - 1
    vol = float(edges[1] - edges[0])
    scale = _field_scale(point, vol)
    q = len(point.active)
    gmats = np.stack([_drift_matrix_1d(point, pos, edges) for pos in range(q)])
    iu = np.triu_indices(edges.size, k=1)
    gflat = gmats[:, iu[0], iu[1]]  # (q, n_boxes)
    rng = np.random.default_rng(seed)
    out = np.empty((cfg.n_sims, q))
    chunk = max(1, int(2e7 // max(iu[0].size, 1)))
    done = 0
    while done < cfg.n_sims:
        k = min(chunk, cfg.n_sims - done)
        z = rng.standard_normal((k, cells, q))
        incr = z @ scale.T
        prefix = np.concatenate([np.zeros((k, 1, q)), np.cumsum(incr, axis=1)], axis=1)
        # G over box (a, b) = prefix[b] - prefix[a]
        diffs = prefix[:, iu[1], :] - prefix[:, iu[0], :]  # (k, n_boxes, q)
        vals = diffs + gflat.T[None, :, :]
        out[done:done + k] = np.minimum(vals.min(axis=1), 0.0)
        done += k
    return out


def _sim_point_general(point: ContactPointParams, cfg: ZSimConfig, seed) -> np.ndarray:
    """General-d path: loop over boxes, vectorize over draws."""
    d = point.d
    edges = cfg.edges(d)
    cells = edges.size - 1
    vol = float(np.diff(edges)[0] ** d)
    scale = _field_scale(point, vol)
    q = len(point.active)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(size=(cfg.n_sims,) + (cells,) * d + (q,))
    incr = z @ scale.T
    prefix = incr
    for axis in range(d):
        prefix = np.cumsum(prefix, axis=axis + 1)
    for axis in range(d):
        shape = list(prefix.shape)
        shape[axis + 1] = 1
        prefix = np.concatenate([np.zeros(shape), prefix], axis=axis + 1)
    best = np.zeros((cfg.n_sims, q))
    pairs = [(a, b) for a in range(edges.size) for b in range(a + 1, edges.size)]
    for combo in itertools.product(pairs, repeat=d):
        lo = [c[0] for c in combo]
        hi = [c[1] for c in combo]
        total = np.zeros((cfg.n_sims, q))
        for corner in itertools.product(*[(0, 1)] * d):
            idx = tuple(hi[k] if corner[k] else lo[k] for k in range(d))
            sign = (-1) ** (d - sum(corner))
            total += sign * prefix[(slice(None),) + idx]
        g = np.array([
            drift_integral(point, point.active[pos],
                           ([edges[i] for i in lo],
                            [edges[hi[k]] - edges[lo[k]] for k in range(d)]))
            for pos in range(q)])
        np.minimum(best, total + g[None, :], out=best)
    return best


def simulate_Z(points, d_y: int, cfg: ZSimConfig = ZSimConfig()) -> np.ndarray:
    """Monte Carlo draws of the limit vector Z.

    Each contact point contributes an independent field; component j takes
    the minimum over the points activating it of the box infimum of
    G_j + g_j.  Components active at no contact point are degenerate at 0.
    Deterministic given cfg.seed.
    """
    points = list(points)
    if not points:
        raise ParameterError("need at least one contact point")
    n = cfg.n_sims
    samples = np.full((n, d_y), np.inf)
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(points))
    for point, seed in zip(points, seeds):
        if max(point.active) >= d_y:
            raise ParameterError("active component index exceeds d_y")
        per = (_sim_point_1d if point.d == 1 else _sim_point_general)(point, cfg, seed)
        for pos, j in enumerate(point.active):
            np.minimum(samples[:, j], per[:, pos], out=samples[:, j])
    samples[np.isinf(samples)] = 0.0
    return samples


def z_quantile(samples: np.ndarray, s: Aggregator, q: float) -> float:
    """Empirical q-quantile of S applied to the rows of the Z draws."""
    if not 0.0 < q < 1.0:
        raise ParameterError("quantile level must be in (0, 1)")
    vals = np.sort(s.rowwise(samples))
    k = math.ceil(q * vals.size) - 1
    return float(vals[max(k, 0)])


def _drift_objective(point: ContactPointParams, pos: int, shift: float):
    d = point.d
    V = point.v_hats[pos]
    f = point.f_hat

    def obj(z):
        s = z[:d]
        t = np.abs(z[d:])
        i0 = t
        i1 = ((s + t) ** 2 - s ** 2) / 2.0
        i2 = ((s + t) ** 3 - s ** 3) / 3.0
        total = 0.0
        for i in range(d):
            rest = np.prod(np.delete(i0, i))
            total += V[i, i] * i2[i] * rest
        for i in range(d):
            for k in range(i + 1, d):
                rest = np.prod(np.delete(i0, [i, k]))
                total += 2.0 * V[i, k] * i1[i] * i1[k] * rest
        return f * (0.5 * total + shift * np.prod(t))

    return obj


def drift_infimum(point: ContactPointParams, j: int, shift: float) -> float:
    """inf over boxes of f * integral(x'V_j x / 2 + shift); 0 when the
    shifted integrand is nonnegative, otherwise located by multi-start
    derivative-free search over the exact closed-form objective."""
    if point.gamma != 2.0:
        raise UnsupportedFeatureError("drift infimum implemented for gamma = 2")
    if j not in point.active:
        raise ParameterError(f"component {j} is not active at this contact point")
    if shift >= 0:
        return 0.0
    pos = point.active.index(j)
    d = point.d
    V = point.v_hats[pos]
    lam = float(np.linalg.eigvalsh(V).min())
    if lam <= 0:
        raise ParameterError("drift infimum needs a positive definite Hessian")
    w = math.sqrt(2.0 * abs(shift) / lam)
    obj = _drift_objective(point, pos, shift)
    best = 0.0
    starts = [np.concatenate([-w * np.ones(d) * c, 2 * w * np.ones(d) * c])
              for c in (0.5, 1.0, 2.0)]
    starts.append(np.concatenate([np.full(d, -0.1 * w), np.full(d, 0.2 * w)]))
    for z0 in starts:
        res = scipy.optimize.minimize(obj, z0, method="Nelder-Mead",
                                      options={"xatol": 1e-10, "fatol": 1e-12,
                                               "maxiter": 4000})
        best = min(best, float(res.fun))
    return min(best, 0.0)


def refinement_diagnostic(points, d_y: int, cfg: ZSimConfig, s: Aggregator,
                          q: float = 0.95) -> dict:
    """Grid falsification check: doubling B and the resolution should move
    the q-quantile of S(Z) only marginally when the truncation is adequate."""
    base = z_quantile(simulate_Z(points, d_y, cfg), s, q)
    fine_cfg = ZSimConfig(B=2 * cfg.B,
                          cells_per_axis=2 * cfg.cells(points[0].d if points else 1),
                          n_sims=cfg.n_sims, seed=cfg.seed)
    fine = z_quantile(simulate_Z(points, d_y, fine_cfg), s, q)
    rel = abs(fine - base) / max(abs(base), 1e-12)
    return {"quantile": q, "base": base, "refined": fine, "rel_change": rel}
