"""Log-linear mortality fits and remaining life expectancy by earnings group."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from ..population import Population
from ..welfare import below_median_mask
from .kernels import EstimationError


@dataclass(frozen=True)
class MortalityFit:
    """Annual death rate in percent: ``exp(constant + slope * age)``."""

    constant: float
    slope: float
    n_deaths: int
    exposure_years: float

    def hazard(self, ages) -> np.ndarray:
        return np.minimum(np.exp(self.constant + self.slope * np.asarray(ages, float)) / 100.0, 1.0)


def survival_curve(constant: float, slope: float, start_age: int = 65, tol: float = 1e-16,
                   max_years: int = 100_000) -> np.ndarray:
    """Probability of being alive at ``start_age + k``, for k = 0, 1, ...

    Hazards are compounded year by year from ``start_age`` with no age cap;
    the curve stops once survival falls below ``tol``.
    """
    out, alive, age = [1.0], 1.0, start_age
    chunk = 256
    while len(out) <= max_years:
        ages = np.arange(age, age + chunk)
        h = np.minimum(np.exp(constant + slope * ages) / 100.0, 1.0)
        s = alive * np.cumprod(1.0 - h)
        keep = s >= tol
        if not keep.all():
            out.extend(s[:int(np.argmin(keep))].tolist())
            return np.asarray(out)
        out.extend(s.tolist())
        alive, age = float(s[-1]), age + chunk
    raise ValueError("survival does not vanish; hazard too small")


def life_expectancy(constant: float, slope: float, start_age: int = 65) -> float:
    """Expected remaining years at ``start_age``: the sum of yearly survival."""
    return float(survival_curve(constant, slope, start_age).sum())


def constant_hazard_life_expectancy(h: float) -> float:
    """Closed form of the survival sum when the yearly hazard is constant."""
    if not 0 < h <= 1:
        raise ValueError("hazard must lie in (0, 1]")
    return 1.0 / h


def exposure_table(death_records: pd.DataFrame, follow_up_years: int) -> pd.DataFrame:
    """Deaths and person-years by group and integer age.

    ``death_records`` holds ``group``, ``entry_age_months`` and
    ``death_age_months`` (negative when alive at the end of follow-up).
    Workers are observed from entry for ``follow_up_years``.
    """
    entry = death_records["entry_age_months"].to_numpy(np.int64)
    death = death_records["death_age_months"].to_numpy(np.int64)
    end = entry + 12 * follow_up_years
    died = (death >= 0) & (death < end)
    exit_ = np.where(died, death, end)
    if np.any(exit_ < entry):
        raise EstimationError("death before entry into observation")
    groups = death_records["group"].to_numpy()
    first, last = int(entry.min() // 12), int(exit_.max() // 12)
    ages = np.arange(first, last + 1)
    lo = np.maximum(ages[None, :] * 12, entry[:, None])
    hi = np.minimum((ages[None, :] + 1) * 12, exit_[:, None])
    months = np.clip(hi - lo, 0, None)
    death_age_year = np.where(died, death // 12, -1)
    rows = []
    for g in sorted(set(groups.tolist())):
        m = groups == g
        exposure = months[m].sum(axis=0) / 12.0
        deaths = np.array([(death_age_year[m] == a).sum() for a in ages])
        for a, e, d in zip(ages, exposure, deaths):
            if e > 0:
                rows.append({"group": g, "age": int(a), "exposure": float(e), "deaths": int(d)})
    return pd.DataFrame(rows, columns=["group", "age", "exposure", "deaths"])


def fit_log_linear(table: pd.DataFrame) -> MortalityFit:
    """OLS of log(death rate in percent) on age over ages with deaths."""
    t = table[table["deaths"] > 0]
    if t.empty:
        raise EstimationError("no deaths in group")
    if len(t) < 2:
        raise EstimationError("need deaths at two or more ages")
    rate = t["deaths"].to_numpy(float) / t["exposure"].to_numpy(float)
    y = np.log(rate * 100.0)
    X = np.column_stack([np.ones(len(t)), t["age"].to_numpy(float)])
    coef = np.linalg.lstsq(X, y, rcond=None)[0]
    return MortalityFit(float(coef[0]), float(coef[1]), int(t["deaths"].sum()),
                        float(table["exposure"].sum()))


@dataclass
class MortalityResult:
    fits: dict
    survival: dict
    life_expectancy: dict
    start_age: int

    @property
    def retirement_gap(self) -> float:
        """Relative excess of above-median over below-median remaining life."""
        return self.life_expectancy["above"] / self.life_expectancy["below"] - 1.0

    def as_dict(self) -> dict:
        return {
            "start_age": self.start_age,
            "fits": {g: {"constant": f.constant, "slope": f.slope, "deaths": f.n_deaths,
                         "exposure_years": f.exposure_years} for g, f in self.fits.items()},
            "life_expectancy": dict(self.life_expectancy),
            "retirement_gap": self.retirement_gap if {"above", "below"} <= set(self.fits) else None,
        }


def mortality_life_expectancy(death_records: pd.DataFrame, groups=("below", "above"),
                              follow_up_years: int = 15, start_age: int = 65) -> MortalityResult:
    """Per-group log-linear mortality fit, extrapolated survival and LE."""
    table = exposure_table(death_records, follow_up_years)
    fits, surv, le = {}, {}, {}
    for g in groups:
        fit = fit_log_linear(table[table["group"] == g])
        fits[g] = fit
        surv[g] = survival_curve(fit.constant, fit.slope, start_age)
        le[g] = float(surv[g].sum())
    return MortalityResult(fits, surv, le, start_age)


def death_records_from_population(pop: Population, cfg=None) -> pd.DataFrame:
    """Records split at median earnings; entry at each worker's retirement age."""
    from ..popgen import retirement_months_of

    below = below_median_mask(pop.z, pop.id)
    return pd.DataFrame({
        "worker_id": pop.id,
        "group": np.where(below, "below", "above"),
        "entry_age_months": retirement_months_of(pop.gender, cfg),
        "death_age_months": pop.death_age_months,
    })


def survival_weights(pop: Population, result: MortalityResult) -> np.ndarray:
    """Per-worker expected retirement years from the group fits."""
    below = below_median_mask(pop.z, pop.id)
    return np.where(below, result.life_expectancy["below"], result.life_expectancy["above"])
