"""Regression kernels: fixed-effects OLS, 2SLS and event studies.

Fixed effects are absorbed by iterated demeaning.  Standard errors are
cluster-robust (CR1) when a cluster column is given and heteroskedasticity
robust (HC1) otherwise; the two coincide when every cluster is a singleton.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import linalg, stats


class EstimationError(ValueError):
    pass


class WeakInstrumentWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RegressionSpec:
    """What to regress on what.

    ``regressors`` lists every second-stage regressor, endogenous ones
    included; ``endogenous`` names the instrumented subset and
    ``instruments`` the excluded instruments.  ``sample_filter`` is a
    ``DataFrame.query`` expression.  A constant is added only when there are
    no fixed effects.
    """

    outcome: str
    regressors: Sequence[str]
    instruments: Sequence[str] = ()
    endogenous: Sequence[str] = ()
    fixed_effects: Sequence[str] = ()
    cluster: str | None = None
    sample_filter: str | None = None

    def validate(self, panel: pd.DataFrame) -> None:
        if len(self.instruments) < len(self.endogenous):
            raise EstimationError("fewer instruments than endogenous regressors")
        missing = [e for e in self.endogenous if e not in self.regressors]
        if missing:
            raise EstimationError(f"endogenous regressors not among regressors: {missing}")
        needed = [self.outcome, *self.regressors, *self.instruments, *self.fixed_effects]
        if self.cluster is not None:
            needed.append(self.cluster)
        absent = [c for c in needed if c not in panel.columns]
        if absent:
            raise EstimationError(f"columns not in panel: {absent}")


@dataclass(frozen=True)
class Coefficient:
    name: str
    estimate: float
    se: float
    t: float
    ci95: tuple[float, float]


@dataclass
class EstimateTable:
    coefficients: dict
    n_obs: int
    r_squared: float
    first_stage_t: float | None = None
    cluster_count: int | None = None
    covariance: np.ndarray | None = field(default=None, repr=False)
    notes: list = field(default_factory=list)

    def __getitem__(self, name: str) -> Coefficient:
        return self.coefficients[name]

    @property
    def names(self) -> list[str]:
        return list(self.coefficients)

    def to_frame(self) -> pd.DataFrame:
        rows = [{"coef": i, "name": c.name, "estimate": c.estimate, "se": c.se, "t": c.t,
                 "ci_lo": c.ci95[0], "ci_hi": c.ci95[1]}
                for i, c in enumerate(self.coefficients.values())]
        return pd.DataFrame(rows, columns=["coef", "name", "estimate", "se", "t", "ci_lo", "ci_hi"])

    def to_csv(self, path_or_buf=None):
        return self.to_frame().to_csv(path_or_buf, index=False, float_format="%.17g",
                                      lineterminator="\n")

    def as_dict(self) -> dict:
        return {
            "coefficients": {n: {"estimate": c.estimate, "se": c.se, "t": c.t, "ci95": list(c.ci95)}
                             for n, c in self.coefficients.items()},
            "n_obs": self.n_obs, "r_squared": self.r_squared,
            "first_stage_t": self.first_stage_t, "cluster_count": self.cluster_count,
            "notes": list(self.notes),
        }


def _codes(values) -> tuple[np.ndarray, int]:
    codes, uniques = pd.factorize(pd.Series(values), sort=True)
    if (codes < 0).any():
        raise EstimationError("missing values in a fixed-effect or cluster column")
    return codes.astype(np.int64), len(uniques)


def demean(matrix: np.ndarray, groups: Sequence[np.ndarray], tol: float = 1e-10,
           max_iter: int = 10_000) -> np.ndarray:
    """Residuals of ``matrix`` columns after projecting out every group factor.

    Alternating projections: subtract group means factor by factor until the
    largest update falls below ``tol`` times the column scale.
    """
    out = np.array(matrix, dtype=float, copy=True)
    if out.ndim == 1:
        out = out[:, None]
    if not groups:
        return out
    counts = [np.bincount(g).astype(float) for g in groups]
    scale = np.maximum(np.abs(out).max(axis=0), 1.0)
    for _ in range(max_iter):
        change = np.zeros(out.shape[1])
        for g, cnt in zip(groups, counts):
            for j in range(out.shape[1]):
                means = np.bincount(g, weights=out[:, j], minlength=len(cnt)) / cnt
                step = means[g]
                out[:, j] -= step
                change[j] = max(change[j], np.abs(step).max())
        if len(groups) == 1 or np.all(change <= tol * scale):
            return out
    raise EstimationError("fixed-effect absorption did not converge")


def _nested(g: np.ndarray, size: int, cluster: np.ndarray | None) -> bool:
    if cluster is None:
        return False
    return len(np.unique(g * (int(cluster.max()) + 1) + cluster)) == size


def _fe_dof(groups: list[np.ndarray], sizes: list[int], cluster: np.ndarray | None) -> int:
    """Parameters used by absorbed effects; effects nested in clusters are free.

    Each further counted factor loses one level to the shared intercept.
    """
    counted = [s for g, s in zip(groups, sizes) if not _nested(g, s, cluster)]
    return sum(counted) - max(len(counted) - 1, 0)


def _check_rank(X: np.ndarray, names: Sequence[str]) -> None:
    if X.shape[1] == 0:
        return
    if X.shape[0] <= X.shape[1]:
        raise EstimationError("fewer observations than regressors")
    _, r, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(X.shape) * np.finfo(float).eps * diag[0] * 1e3
    rank = int(np.sum(diag > tol))
    if rank < X.shape[1]:
        dropped = [names[i] for i in piv[rank:]]
        raise EstimationError(f"singular design: collinear regressors {dropped}")


def _covariance(scores_x: np.ndarray, resid: np.ndarray, bread: np.ndarray,
                cluster: np.ndarray | None, n_clusters: int, n: int, k: int) -> np.ndarray:
    if cluster is None:
        u = scores_x * resid[:, None]
        meat = u.T @ u
        return bread @ meat @ bread * (n / (n - k))
    sums = np.zeros((n_clusters, scores_x.shape[1]))
    np.add.at(sums, cluster, scores_x * resid[:, None])
    meat = sums.T @ sums
    corr = n_clusters / (n_clusters - 1) * (n - 1) / (n - k)
    return bread @ meat @ bread * corr


def _table(names, beta, cov, n, r2, first_t, n_clusters, notes=()) -> EstimateTable:
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    coefs = {}
    for name, b, s in zip(names, beta, se):
        t = b / s if s > 0 else (0.0 if b == 0 else np.inf * np.sign(b))
        coefs[name] = Coefficient(name, float(b), float(s), float(t),
                                  (float(b - 1.96 * s), float(b + 1.96 * s)))
    return EstimateTable(coefs, int(n), float(r2), first_t, n_clusters, cov, list(notes))


@dataclass
class _Design:
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    names: list
    cluster: np.ndarray | None
    n_clusters: int | None
    fe_dof: int
    sst: float


def _prepare(panel: pd.DataFrame, spec: RegressionSpec) -> _Design:
    spec.validate(panel)
    df = panel.query(spec.sample_filter) if spec.sample_filter else panel
    cols = [spec.outcome, *spec.regressors, *spec.instruments]
    data = df[cols].to_numpy(dtype=float)
    if not np.all(np.isfinite(data)):
        raise EstimationError("non-finite values in regression columns")
    groups, sizes = [], []
    for fe in spec.fixed_effects:
        g, s = _codes(df[fe].to_numpy())
        groups.append(g)
        sizes.append(s)
    cluster, n_clusters = None, None
    if spec.cluster is not None:
        cluster, n_clusters = _codes(df[spec.cluster].to_numpy())
        if n_clusters < 2:
            raise EstimationError("fewer than two clusters")
    # canonical row order so results do not depend on the input ordering
    keys = [data[:, j] for j in range(data.shape[1])[::-1]] + groups[::-1]
    if cluster is not None:
        keys.append(cluster)
    order = np.lexsort(keys)
    data = data[order]
    groups = [g[order] for g in groups]
    if cluster is not None:
        cluster = cluster[order]
    names = list(spec.regressors)
    if groups:
        data = demean(data, groups)
        fe_dof = _fe_dof(groups, sizes, cluster)
    else:
        data = np.column_stack([data, np.ones(len(df))])
        names = names + ["const"]
        fe_dof = 0
    k = len(spec.regressors)
    y = data[:, 0]
    X = data[:, 1:1 + k]
    Z = data[:, 1 + k:1 + k + len(spec.instruments)]
    if not groups:
        X = np.column_stack([X, data[:, -1]])
        Z = np.column_stack([Z, data[:, -1]]) if Z.shape[1] else Z
    sst = float(np.sum((y - (0.0 if groups else y.mean())) ** 2))
    return _Design(y, X, Z, names, cluster, n_clusters, fe_dof, sst)


def ols_fe(panel: pd.DataFrame, spec: RegressionSpec) -> EstimateTable:
    """OLS with absorbed fixed effects and robust or clustered errors.

    ``r_squared`` is the within R-squared when effects are absorbed.
    """
    if spec.instruments or spec.endogenous:
        raise EstimationError("use tsls for instrumented specifications")
    d = _prepare(panel, spec)
    _check_rank(d.X, d.names)
    xtx_inv = np.linalg.inv(d.X.T @ d.X)
    beta = xtx_inv @ (d.X.T @ d.y)
    resid = d.y - d.X @ beta
    n, k = d.X.shape[0], d.X.shape[1] + d.fe_dof
    cov = _covariance(d.X, resid, xtx_inv, d.cluster, d.n_clusters or 0, n, k)
    r2 = 1.0 - float(resid @ resid) / d.sst if d.sst > 0 else 1.0
    return _table(d.names, beta, cov, n, r2, None, d.n_clusters)


def tsls(panel: pd.DataFrame, spec: RegressionSpec, weak_threshold: float = 10.0) -> EstimateTable:
    """Two-stage least squares.

    Second-stage residuals use the actual (not fitted) endogenous regressors.
    ``first_stage_t`` is the robust t-statistic of the first excluded
    instrument in the first stage of the first endogenous regressor; a value
    below ``weak_threshold`` in magnitude triggers a warning.
    """
    if not spec.endogenous:
        raise EstimationError("tsls needs at least one endogenous regressor")
    d = _prepare(panel, spec)
    endo_idx = [list(spec.regressors).index(e) for e in spec.endogenous]
    exo_idx = [i for i in range(d.X.shape[1]) if i not in endo_idx]
    W = np.column_stack([d.Z[:, :len(spec.instruments)], d.X[:, exo_idx]])
    w_names = list(spec.instruments) + [d.names[i] for i in exo_idx]
    _check_rank(W, w_names)
    wtw_inv = np.linalg.inv(W.T @ W)
    n = d.X.shape[0]

    fs_coef = wtw_inv @ (W.T @ d.X[:, endo_idx[0]])
    fs_resid = d.X[:, endo_idx[0]] - W @ fs_coef
    fs_cov = _covariance(W, fs_resid, wtw_inv, d.cluster, d.n_clusters or 0, n, W.shape[1] + d.fe_dof)
    fs_se = float(np.sqrt(fs_cov[0, 0]))
    first_t = float(fs_coef[0] / fs_se) if fs_se > 0 else float(np.copysign(np.inf, fs_coef[0]))
    notes = []
    if abs(first_t) < weak_threshold:
        msg = f"weak instrument: first-stage t = {first_t:.2f}"
        warnings.warn(msg, WeakInstrumentWarning, stacklevel=2)
        notes.append(msg)

    X_hat = W @ (wtw_inv @ (W.T @ d.X))
    _check_rank(X_hat, d.names)
    bread = np.linalg.inv(X_hat.T @ X_hat)
    beta = bread @ (X_hat.T @ d.y)
    resid = d.y - d.X @ beta
    cov = _covariance(X_hat, resid, bread, d.cluster, d.n_clusters or 0, n, d.X.shape[1] + d.fe_dof)
    r2 = 1.0 - float(resid @ resid) / d.sst if d.sst > 0 else 1.0
    return _table(d.names, beta, cov, n, r2, first_t, d.n_clusters, notes)


@dataclass
class EventStudyResult:
    path: pd.DataFrame
    pre_wald: float
    pre_df: int
    pre_p: float
    table: EstimateTable
    empty_bins: list

    def as_dict(self) -> dict:
        return {"path": self.path.to_dict(orient="list"), "pre_wald": self.pre_wald,
                "pre_df": self.pre_df, "pre_p": self.pre_p, "empty_bins": list(self.empty_bins)}


def event_bins(event_time, bin_width: int = 1) -> np.ndarray:
    """Bin start of each event time (NaN stays NaN)."""
    e = np.asarray(event_time, dtype=float)
    return np.floor(e / bin_width) * bin_width


def event_study(panel: pd.DataFrame, spec: RegressionSpec, event_col: str,
                window: tuple[int, int], normalize_at: int, bin_width: int = 1
                ) -> EventStudyResult:
    """Event-time coefficients relative to the bin containing ``normalize_at``.

    Rows with missing event time are never-treated controls (all dummies
    zero); treated rows outside ``window`` are dropped.  Bins without any
    observation are reported in ``empty_bins`` and left out.  The pre-period
    Wald statistic tests that all bins before the omitted one are zero.
    """
    lo, hi = window
    if not lo <= normalize_at <= hi:
        raise EstimationError("normalize_at must lie inside the window")
    if event_col not in panel.columns:
        raise EstimationError(f"column {event_col!r} not in panel")
    df = panel.query(spec.sample_filter) if spec.sample_filter else panel
    e = df[event_col].to_numpy(dtype=float)
    inside = np.isnan(e) | ((e >= lo) & (e <= hi))
    df = df.loc[inside].copy()
    b = event_bins(df[event_col].to_numpy(dtype=float), bin_width)
    omit = float(event_bins([normalize_at], bin_width)[0])
    all_bins = np.unique(event_bins(np.arange(lo, hi + 1), bin_width))
    names, empty = [], []
    for v in all_bins:
        if v == omit:
            continue
        mask = b == v
        if not mask.any():
            empty.append(int(v))
            continue
        name = f"event[{int(v)}]"
        df[name] = mask.astype(float)
        names.append((int(v), name))
    es_spec = RegressionSpec(outcome=spec.outcome, regressors=[n for _, n in names] + list(spec.regressors),
                             fixed_effects=spec.fixed_effects, cluster=spec.cluster)
    table = ols_fe(df, es_spec)
    rows = [{"event_time": int(omit), "estimate": 0.0, "se": 0.0, "ci_lo": 0.0, "ci_hi": 0.0,
             "n_obs": int(np.sum(b == omit))}]
    for v, name in names:
        c = table[name]
        rows.append({"event_time": v, "estimate": c.estimate, "se": c.se, "ci_lo": c.ci95[0],
                     "ci_hi": c.ci95[1], "n_obs": int(np.sum(b == v))})
    path = pd.DataFrame(rows).sort_values("event_time", kind="stable").reset_index(drop=True)
    pre = [i for i, (v, _) in enumerate(names) if v < omit]
    if pre:
        beta = np.array([table[names[i][1]].estimate for i in pre])
        idx = [table.names.index(names[i][1]) for i in pre]
        cov = table.covariance[np.ix_(idx, idx)]
        wald = float(beta @ np.linalg.pinv(cov) @ beta)
        p = float(stats.chi2.sf(wald, len(pre)))
    else:
        wald, p = 0.0, 1.0
    return EventStudyResult(path, wald, len(pre), p, table, empty)
