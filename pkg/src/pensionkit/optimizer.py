"""Optimal (kappa, phi): FOC solve, Hessian check, bootstrap and sweeps."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import fsolve
from scipy.stats import qmc

from . import rng
from .core import BehavioralParams, PolicyParams, Reform, Variant
from .population import Population
from .welfare import (Economy, WelfareError, below_median_mask, gradient,
                      mechanical_transfer, moments_from_arrays, money_metric)


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimalDesign:
    kappa_star: float
    phi_star: float
    foc_residuals: tuple[float, float]
    hessian_det: float
    concave: bool
    iterations: int
    progressivity_share: float | None = None

    def as_dict(self) -> dict:
        return {
            "kappa_star": self.kappa_star, "phi_star": self.phi_star,
            "foc_residuals": list(self.foc_residuals), "hessian_det": self.hessian_det,
            "concave": self.concave, "iterations": self.iterations,
            "progressivity_share": self.progressivity_share,
        }


@dataclass(frozen=True)
class Box:
    kappa: tuple[float, float] = (0.01, 0.40)
    phi: tuple[float, float] = (0.01, 0.99)

    def lower(self) -> np.ndarray:
        return np.array([self.kappa[0], self.phi[0]])

    def upper(self) -> np.ndarray:
        return np.array([self.kappa[1], self.phi[1]])

    def contains(self, x) -> bool:
        return bool(np.all(x >= self.lower()) and np.all(x <= self.upper()))


class DesignModel:
    """Welfare model over (kappa, phi) anchored at an observed status quo.

    ``foc`` returns the two gradient totals at the counterfactual allocation
    of a design, with disutility recalibrated there.  ``local_welfare(center)``
    returns the welfare function of the economy recentered at ``center``,
    whose derivatives at ``center`` are ``foc(center)``.
    """

    def __init__(self, econ: Economy):
        self.econ = econ

    @classmethod
    def from_population(cls, pop: Population, status_quo: PolicyParams,
                        behav: BehavioralParams, survival=None) -> "DesignModel":
        return cls(Economy(pop, status_quo, behav, survival=survival))

    @property
    def status_quo(self) -> PolicyParams:
        return self.econ.reference

    @property
    def behav(self) -> BehavioralParams:
        return self.econ.behav

    def policy_at(self, kappa: float, phi: float) -> PolicyParams:
        return self.status_quo.with_design(kappa, phi)

    def centered(self, kappa: float, phi: float):
        """Allocation arrays and centered policy at a design."""
        policy = self.policy_at(kappa, phi)
        al = self.econ.allocation(policy)
        e_bar = al.b - phi * kappa * policy.R * float(al.z.mean())
        return al, replace(policy, E_bar=e_bar)

    def decomposition(self, kappa: float, phi: float):
        al, policy = self.centered(kappa, phi)
        m = moments_from_arrays(al.z, al.c1, al.c2, self.econ.rec, self.behav, policy.R,
                                survival=self.econ.survival)
        return gradient(policy, self.behav, m), m, policy, al

    def foc(self, x) -> np.ndarray:
        g, *_ = self.decomposition(float(x[0]), float(x[1]))
        return np.array([g[Reform.KAPPA].total, g[Reform.PHI].total])

    def local_welfare(self, center) -> Callable[[float, float], float]:
        econ, policy = self.econ.recenter(self.policy_at(float(center[0]), float(center[1])))

        def w(kappa, phi):
            return econ.welfare(policy.with_design(kappa, phi))
        return w

    def progressivity(self, kappa: float, phi: float) -> float:
        """Progressivity share of the allocation at a design."""
        al, policy = self.centered(kappa, phi)
        return progressivity_share(policy, self.econ.pop.replace_columns(z=al.z))

    def gains(self, kappa: float | None = None, phi: float | None = None,
              numeraire: str = "active") -> dict:
        """Money-metric gain per mechanically transferred dollar for both reforms."""
        kappa = self.status_quo.kappa if kappa is None else kappa
        phi = self.status_quo.phi if phi is None else phi
        g, m, policy, al = self.decomposition(kappa, phi)
        out = {}
        for reform in Reform:
            mech = mechanical_transfer(reform, al.z, policy)
            out[reform] = money_metric(g[reform], m, policy, mech, numeraire=numeraire,
                                       mpc=self.behav.mpc)
        return out


def _jacobian(f, x, fx=None, h=1e-6):
    jac = np.empty((2, 2))
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        jac[:, j] = (f(x + e) - f(x - e)) / (2 * h)
    return jac


def _newton(f, x0, box: Box, tol: float, max_iter: int = 60):
    x = np.asarray(x0, dtype=float)
    lo, hi = box.lower(), box.upper()
    try:
        fx = f(x)
    except (WelfareError, ValueError):
        return None, np.full(2, np.nan), 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(fx)) <= tol:
            return x, fx, it - 1
        try:
            jac = _jacobian(f, x)
            step = np.linalg.solve(jac, fx)
        except (np.linalg.LinAlgError, WelfareError, ValueError):
            return None, fx, it
        if not np.all(np.isfinite(step)):
            return None, fx, it
        t = 1.0
        norm = np.linalg.norm(fx)
        while t > 1e-6:
            cand = x - t * step
            if np.all(cand >= lo) and np.all(cand <= hi):
                try:
                    fc = f(cand)
                except (WelfareError, ValueError):
                    fc = None
                if fc is not None and np.all(np.isfinite(fc)) and np.linalg.norm(fc) < norm:
                    x, fx = cand, fc
                    break
            t *= 0.5
        else:
            return None, fx, it
    if np.max(np.abs(fx)) <= tol:
        return x, fx, max_iter
    return None, fx, max_iter


def _grid_bracket(f, box: Box, n: int = 9):
    """Start point from a coarse grid: the cell centre where both FOCs change sign."""
    ks = np.linspace(*box.kappa, n)
    ps = np.linspace(*box.phi, n)
    vals = np.full((n, n, 2), np.nan)
    for i, k in enumerate(ks):
        for j, p in enumerate(ps):
            try:
                vals[i, j] = f(np.array([k, p]))
            except (WelfareError, ValueError):
                pass
    best, best_norm = None, np.inf
    for i in range(n - 1):
        for j in range(n - 1):
            cell = vals[i:i + 2, j:j + 2].reshape(4, 2)
            if np.isnan(cell).any():
                continue
            if cell[:, 0].min() <= 0 <= cell[:, 0].max() and cell[:, 1].min() <= 0 <= cell[:, 1].max():
                norm = np.abs(cell).sum()
                if norm < best_norm:
                    best, best_norm = np.array([(ks[i] + ks[i + 1]) / 2, (ps[j] + ps[j + 1]) / 2]), norm
    return best


def quasi_random_starts(box: Box, count: int) -> np.ndarray:
    pts = qmc.Halton(d=2, scramble=False).random(count + 1)[1:]
    lo, hi = box.lower(), box.upper()
    # keep starts off the box edges
    return lo + (hi - lo) * (0.1 + 0.8 * pts)


def solve_optimum(model, box: Box = Box(), tol: float = 1e-8, start=None, n_starts: int = 5,
                  agree: float = 1e-6, hessian_step: float | None = None) -> OptimalDesign:
    """Root of the two welfare gradients by damped Newton with multi-start.

    ``model`` needs ``foc(x) -> array(2)`` and ``local_welfare(center)``.
    With ``start`` given only that start is used (bootstrap replicates).
    """
    starts = [np.asarray(start, float)] if start is not None else list(quasi_random_starts(box, n_starts))
    f = model.foc
    roots, iterations = [], 0
    for x0 in starts:
        x, fx, it = _newton(f, x0, box, tol)
        iterations += it
        if x is None:
            x1 = _grid_bracket(f, box)
            if x1 is not None:
                x, fx, it = _newton(f, x1, box, tol)
                iterations += it
        if x is not None:
            roots.append((x, fx))
    if not roots:
        raise SolverError("no interior root of the first-order conditions in the box")
    x, fx = roots[0]
    for other, _ in roots[1:]:
        if np.max(np.abs(other - x)) > agree:
            raise SolverError(f"non-unique optimum: {x} vs {other}")
    if len(roots) < len(starts):
        raise SolverError(f"{len(starts) - len(roots)} of {len(starts)} starts failed to converge")
    jac = _jacobian(f, x)
    if abs(np.linalg.det(jac)) < 1e-14 * max(1.0, np.abs(jac).max() ** 2):
        raise SolverError("singular Jacobian at the root")
    h = hessian_step if hessian_step is not None else 1e-4 * min(np.diff(box.kappa)[0], np.diff(box.phi)[0])
    hd = hessian_diagnostics(model, x, h)
    prog = model.progressivity(float(x[0]), float(x[1])) if hasattr(model, "progressivity") else None
    return OptimalDesign(kappa_star=float(x[0]), phi_star=float(x[1]),
                         foc_residuals=(float(fx[0]), float(fx[1])),
                         hessian_det=hd["det"], concave=hd["concave"], iterations=iterations,
                         progressivity_share=prog)


def hessian_diagnostics(model, point, h: float = 1e-4, welfare: Callable | None = None) -> dict:
    """Central second differences of welfare around ``point``.

    ``welfare(kappa, phi)`` may be injected directly; otherwise the model's
    welfare recentered at ``point`` is used.
    """
    k, p = float(point[0]), float(point[1])
    if min(k, p) - h <= 0 or max(k, p) + h >= 1:
        raise SolverError("point within h of the boundary")
    w = welfare if welfare is not None else model.local_welfare((k, p))
    w0 = w(k, p)
    d2k = (w(k + h, p) - 2 * w0 + w(k - h, p)) / h**2
    d2p = (w(k, p + h) - 2 * w0 + w(k, p - h)) / h**2
    cross_a = (w(k + h, p + h) - w(k + h, p - h) - w(k - h, p + h) + w(k - h, p - h)) / (4 * h**2)
    # other ordering: difference in phi first, then kappa
    cross_b = ((w(k + h, p + h) - w(k - h, p + h)) - (w(k + h, p - h) - w(k - h, p - h))) / (4 * h**2)
    cross = 0.5 * (cross_a + cross_b)
    det = d2k * d2p - cross**2
    return {"det": det, "d2_kappa": d2k, "d2_phi": d2p, "cross": cross,
            "concave": bool(det > 0 and d2k < 0 and d2p < 0)}


@dataclass
class BootstrapResult:
    replicates: list
    failures: int
    percentile: dict
    hull: np.ndarray

    def as_dict(self) -> dict:
        return {"failures": self.failures, "percentile": self.percentile,
                "hull": self.hull.tolist(),
                "replicates": [[r[0], r[1]] for r in self.replicates]}


def resample_ids(n: int, seed: int, replicate: int) -> np.ndarray:
    s = rng.substream_seed(seed, "bootstrap", replicate)
    return rng.integers(s, "draw", np.arange(n), n)


def pairs_bootstrap(pop: Population, pipeline: Callable[[Population], tuple[float, float]],
                    B: int, seed: int, level: float = 0.95, max_failure_rate: float = 0.05,
                    n_jobs: int = 1) -> BootstrapResult:
    """Resample workers with replacement and rerun ``pipeline`` per replicate.

    Replicate ``b`` draws its indices from its own stream, so results are keyed
    by replicate index and do not depend on execution order or ``n_jobs``.
    """
    if B < 2:
        raise ValueError("need at least two replicates")
    order = np.argsort(pop.id, kind="stable")
    base = pop.take(order)

    def one(b: int):
        idx = np.sort(resample_ids(len(base), seed, b))
        sample = base.take(idx).replace_columns(id=np.arange(len(idx)))
        try:
            return tuple(float(v) for v in pipeline(sample))
        except (SolverError, WelfareError, ValueError):
            return None

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            reps = list(ex.map(one, range(B)))
    else:
        reps = [one(b) for b in range(B)]
    failures = sum(r is None for r in reps)
    if failures > max_failure_rate * B:
        raise SolverError(f"{failures} of {B} bootstrap replicates failed")
    ok = np.array([r for r in reps if r is not None])
    alpha = (1.0 - level) / 2.0
    pct = {
        "kappa": [float(np.quantile(ok[:, 0], alpha)), float(np.quantile(ok[:, 0], 1 - alpha))],
        "phi": [float(np.quantile(ok[:, 1], alpha)), float(np.quantile(ok[:, 1], 1 - alpha))],
    }
    return BootstrapResult(replicates=[r for r in reps if r is not None], failures=failures,
                           percentile=pct, hull=mahalanobis_hull(ok, level))


def mahalanobis_hull(points: np.ndarray, level: float = 0.95) -> np.ndarray:
    """Convex hull (counter-clockwise vertices) of the most central points."""
    from scipy.spatial import ConvexHull, QhullError

    center = points.mean(axis=0)
    cov = np.cov(points.T)
    dev = points - center
    try:
        dist = np.einsum("ij,jk,ik->i", dev, np.linalg.pinv(cov), dev)
    except np.linalg.LinAlgError:
        dist = np.zeros(len(points))
    keep = points[dist <= np.quantile(dist, level)]
    try:
        hull = ConvexHull(keep)
        return keep[hull.vertices]
    except (QhullError, ValueError):
        return np.unique(keep, axis=0)


def _chord(f, x0, jac: np.ndarray, box: Box, tol: float, max_iter: int = 30):
    """Fixed-Jacobian Newton iteration; None when it stalls or leaves the box."""
    x = np.asarray(x0, dtype=float)
    try:
        fx = f(x)
        for it in range(max_iter + 1):
            if np.max(np.abs(fx)) <= tol:
                return x
            if it == max_iter:
                break
            x = x - np.linalg.solve(jac, fx)
            if not box.contains(x):
                return None
            fx = f(x)
    except (WelfareError, ValueError, np.linalg.LinAlgError):
        return None
    return None


def optimum_pipeline(status_quo: PolicyParams, behav: BehavioralParams, start, box: Box = Box(),
                     tol: float = 1e-8, jacobian: np.ndarray | None = None):
    """Closure pop -> (kappa*, phi*) from a single start (bootstrap use).

    With ``jacobian`` given (typically the full-sample Jacobian at the
    optimum) a chord iteration is tried first; damped Newton is the fallback.
    """

    def run(pop: Population):
        model = DesignModel.from_population(pop, status_quo, behav)
        x = None
        if jacobian is not None:
            x = _chord(model.foc, start, jacobian, box, tol)
        if x is None:
            x, fx, _ = _newton(model.foc, np.asarray(start, float), box, tol)
        if x is None:
            res = solve_optimum(model, box=box, tol=tol, n_starts=1)
            return res.kappa_star, res.phi_star
        return float(x[0]), float(x[1])
    return run


def foc_jacobian(model, point) -> np.ndarray:
    return _jacobian(model.foc, np.asarray(point, float))


def linear_template(policy: PolicyParams) -> PolicyParams:
    """Linear-rule design space anchored at a status quo.

    A means-tested status quo has no explicit pension tax; the search over
    (kappa, phi) starts from the same contribution rate, no tax and the same
    baseline transfer.
    """
    if policy.variant is Variant.LINEAR:
        return policy
    return replace(policy, variant=Variant.LINEAR, pbs=None, pmas=None, phi=0.0)


def comparative_statics(model: DesignModel, param: str, grid: Sequence[float],
                        numeraire: str = "active") -> list[dict]:
    """Gains per dollar of both reforms at the status quo across a parameter grid."""
    if param not in ("gamma", "theta", "beta"):
        raise ValueError(f"unknown sweep parameter {param!r}")
    rows = []
    for value in grid:
        behav = replace(model.behav, **{param: float(value)})
        m = DesignModel(Economy(model.econ.pop, model.status_quo, behav, survival=model.econ.survival))
        g = m.gains(numeraire=numeraire)
        row = {"param": param, "value": float(value),
               "gain_kappa": g[Reform.KAPPA].gain_per_dollar,
               "gain_phi": g[Reform.PHI].gain_per_dollar,
               "bias_kappa": g[Reform.KAPPA].bias_correction,
               "bias_phi": g[Reform.PHI].bias_correction}
        if param == "theta":
            row["rational_drop"] = 1.0 - float(value) ** (1.0 / behav.gamma)
        rows.append(row)
    return rows


def progressivity_share(policy: PolicyParams, pop: Population) -> float:
    """Share of pension spending received by workers below median earnings.

    Spending is every pension paid under the mandate: the self-funded part
    (net of the implicit subsidy tax), the subsidy and the lump sum.
    """
    if len(pop) == 0:
        raise ValueError("empty population")
    z = pop.z
    zbar = float(z.mean())
    t = policy.implicit_tax * pop.recipient if policy.variant is Variant.CHILE else 0.0
    pbs = policy.pbs * pop.recipient if policy.variant is Variant.CHILE else 0.0
    lump = policy.phi * policy.kappa * policy.R * zbar + policy.E_bar
    benefits = (1.0 - t) * (1.0 - policy.phi) * policy.kappa * policy.R * z + pbs + lump
    benefits = np.broadcast_to(benefits, z.shape)
    # correctly rounded sums, so equal benefits give exactly half for even n
    total = math.fsum(benefits)
    if not total > 0:
        raise ValueError("zero public pension spending")
    below = below_median_mask(z, pop.id)
    return math.fsum(benefits[below]) / total


def construct_fixed_point(pop: Population, planted: PolicyParams, behav: BehavioralParams):
    """Reshape consumption so that both FOCs vanish at ``planted``.

    Two knobs are solved for: the level of retirement consumption, which moves
    the social-insurance motive for kappa, and a compression of consumption
    dispersion around its geometric mean, which moves the value of
    redistribution for phi.  Returns the adjusted population.
    """
    log_c1 = np.log(pop.c1)
    centre = float(log_c1.mean())
    drop = np.log(pop.c2) - log_c1
    rec = pop.recipient if planted.variant is Variant.CHILE else np.zeros(len(pop), bool)

    def reshape(v):
        c1 = np.exp(centre + np.exp(v[1]) * (log_c1 - centre))
        return c1, c1 * np.exp(drop + v[0])

    def resid(v):
        c1, c2 = reshape(v)
        g = gradient(planted, behav, moments_from_arrays(pop.z, c1, c2, rec, behav, planted.R))
        # scale by mean marginal utility to keep the system well conditioned
        u = float(np.mean(c1 ** -behav.gamma))
        return [g[Reform.KAPPA].total / u, g[Reform.PHI].total / u]

    sol, info, ok, msg = fsolve(resid, [0.0, 0.0], full_output=True, xtol=1e-13)
    if ok != 1 or np.max(np.abs(info["fvec"])) > 1e-10:
        raise SolverError(f"could not construct fixed point: {msg}")
    c1, c2 = reshape(sol)
    return pop.replace_columns(c1=c1, c2=c2)
