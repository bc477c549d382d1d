"""Synthetic worker populations and earnings panels with planted responses."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import ndtr

from . import rng
from .config import ScenarioConfig
from .core import BehavioralParams, PolicyParams, Variant
from .population import Population, month_index

PANEL_COLUMNS = ["worker_id", "period", "taxable_earnings", "employed", "net_of_tax_rate",
                 "consumption"]
DEFAULT_RETIREMENT_MONTHS = {"F": 720, "M": 780}


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class FundShares:
    alpha_B: float
    alpha_C: float
    alpha_D: float

    def __post_init__(self):
        total = self.alpha_B + self.alpha_C + self.alpha_D
        if total != 1.0 or min(self.alpha_B, self.alpha_C, self.alpha_D) < 0:
            raise ValueError("fund shares must be non-negative and sum to one")


def glide_fifths(age_months, retirement_months):
    """Default allocation in fifths: (B, C, D) integer arrays summing to 5.

    Savings sit in B until 36; one fifth moves to C at each birthday from 36
    to 40, and one fifth moves from C to D at each birthday starting ten years
    before retirement.
    """
    years = np.asarray(age_months) // 12
    ret_years = np.asarray(retirement_months) // 12
    to_c = np.clip(years - 35, 0, 5)
    to_d = np.clip(years - (ret_years - 10) + 1, 0, 5)
    to_d = np.minimum(to_d, to_c)
    return 5 - to_c, to_c - to_d, to_d


def glide_path_shares(age_months: int, gender: str, retirement_months: int | None = None
                      ) -> FundShares:
    if age_months < 0:
        raise ValueError("age must be non-negative")
    ret = retirement_months if retirement_months is not None else DEFAULT_RETIREMENT_MONTHS[gender]
    b, c, d = (int(x) for x in glide_fifths(age_months, ret))
    return FundShares(b / 5, c / 5, d / 5)


@dataclass(frozen=True)
class FundReturns:
    """Monthly gross returns of funds B, C and D from ``start`` (month index)."""

    start: int
    gross: dict

    def __post_init__(self):
        lengths = {len(v) for v in self.gross.values()}
        if set(self.gross) != {"B", "C", "D"} or len(lengths) != 1:
            raise ValueError("need aligned series for funds B, C and D")
        for v in self.gross.values():
            if np.any(np.asarray(v) <= 0):
                raise ValueError("gross returns must be positive")

    @property
    def end(self) -> int:
        return self.start + len(self.gross["B"]) - 1

    def covers(self, first: int, last: int) -> bool:
        return self.start <= first and last <= self.end

    def window(self, first: int, last: int) -> dict:
        if not self.covers(first, last):
            raise GenerationError("fund returns do not cover the requested months")
        lo, hi = first - self.start, last - self.start + 1
        return {k: np.asarray(v[lo:hi], dtype=float) for k, v in self.gross.items()}

    @classmethod
    def from_config(cls, cfg: ScenarioConfig) -> "FundReturns":
        path = cfg["fund_returns.file"]
        if path:
            df = pd.read_csv(Path(path), dtype={"month": str})
            months = [month_index(m) for m in df["month"]]
            if months != list(range(months[0], months[0] + len(months))):
                raise GenerationError("fund return file must list contiguous months")
            return cls(months[0], {k: df[k].to_numpy(float) for k in "BCD"})
        lo, hi = cfg["fund_returns.start"], cfg["fund_returns.end"]
        months = np.arange(lo, hi + 1)
        crisis = (months >= cfg["crisis_window.start"]) & (months <= cfg["crisis_window.end"])
        gross = {}
        for k in "BCD":
            gross[k] = 1.0 + np.where(crisis, cfg[f"fund_returns.{k}.crisis"], cfg[f"fund_returns.{k}.normal"])
        return cls(int(lo), gross)


def retirement_months_of(gender: np.ndarray, cfg: ScenarioConfig | None = None) -> np.ndarray:
    if cfg is None:
        f, m = DEFAULT_RETIREMENT_MONTHS["F"], DEFAULT_RETIREMENT_MONTHS["M"]
    else:
        f, m = cfg.retirement_age_months("F"), cfg.retirement_age_months("M")
    return np.where(np.asarray(gender) == "F", f, m)


def gompertz_death_age_months(u: np.ndarray, start_age_months: np.ndarray, constant: np.ndarray,
                              slope: np.ndarray, max_age_years: int = 150) -> np.ndarray:
    """Death age from annual hazards exp(constant + slope * age) / 100.

    ``u`` is uniform; a worker dies in the first year whose cumulative survival
    falls below ``u``, at a month within that year set by ``u``'s position.
    """
    start_years = np.asarray(start_age_months) // 12
    ages = np.arange(int(start_years.min()), max_age_years + 1)
    hazard = np.minimum(np.exp(constant[:, None] + slope[:, None] * ages[None, :]) / 100.0, 1.0)
    hazard = np.where(ages[None, :] < start_years[:, None], 0.0, hazard)
    surv_end = np.cumprod(1.0 - hazard, axis=1)
    died = surv_end < u[:, None]
    first = np.where(died.any(axis=1), died.argmax(axis=1), len(ages) - 1)
    surv_begin = np.where(first > 0, surv_end[np.arange(len(u)), np.maximum(first - 1, 0)], 1.0)
    surv_begin = np.where(ages[first] <= start_years, 1.0, surv_begin)
    h = hazard[np.arange(len(u)), first]
    frac = np.where(h > 0, (surv_begin - u) / np.maximum(surv_begin * h, 1e-300), 0.0)
    months = ages[first] * 12 + np.clip((frac * 12).astype(np.int64), 0, 11)
    return np.maximum(months, np.asarray(start_age_months)).astype(np.int64)


def generate_population(cfg: ScenarioConfig, seed: int | None = None) -> Population:
    """Draw ``cfg.n_workers`` workers.

    Log earnings are normal; log c1 and the consumption drop
    ``log c1 - log c2`` are linear in log z plus Gaussian noise.  Every draw
    comes from a counter-based stream keyed by worker id.
    """
    seed = cfg.seed if seed is None else seed
    if seed is None:
        raise GenerationError("seed: no seed in config and none given")
    n = cfg.n_workers
    ids = np.arange(n, dtype=np.int64)
    v = cfg.values
    gender = np.where(rng.uniforms(seed, "gender", ids) < 0.5, "F", "M")
    dob_span = v["dob.end"] - v["dob.start"] + 1
    dob = v["dob.start"] + rng.integers(seed, "dob", ids, dob_span)
    log_z = v["earnings_law.log_mean"] + v["earnings_law.log_sd"] * rng.normals(seed, "z", ids)
    z = np.exp(log_z)
    log_c1 = (v["consumption_link.c1_intercept"] + v["consumption_link.c1_slope"] * log_z
              + v["consumption_link.c1_noise_sd"] * rng.normals(seed, "c1", ids))
    drop = (v["consumption_link.drop_intercept"] + v["consumption_link.drop_slope"] * log_z
            + v["consumption_link.drop_noise_sd"] * rng.normals(seed, "drop", ids))
    c1 = np.exp(log_c1)
    c2 = np.exp(log_c1 - drop)

    ret = retirement_months_of(gender, cfg)
    age_at_crisis = v["crisis_window.start"] - 1 - dob
    career = np.clip((age_at_crisis - 240) / v["panel.career_months"], 0.0, 1.0)
    policy = cfg.policy
    s_pre = policy.kappa * z * career * np.exp(0.2 * rng.normals(seed, "s_pre", ids) - 0.02)

    conf = v["treatment.confounding"]
    sd = v["earnings_law.log_sd"]
    std_z = (log_z - v["earnings_law.log_mean"]) / sd if sd > 0 else np.zeros(n)
    latent = (rng.normals(seed, "pfa", ids) + conf * std_z) / np.sqrt(1.0 + conf**2)
    pfa = np.minimum((ndtr(latent) * v["pfa.count"]).astype(np.int64), v["pfa.count"] - 1)

    if policy.variant is Variant.CHILE:
        self_funded = (1.0 - policy.phi) * policy.kappa * policy.R * z
        recipient = (self_funded < policy.pmas) & (rng.uniforms(seed, "take_up", ids) < v["recipient.take_up"])
    else:
        recipient = np.zeros(n, dtype=bool)

    below = np.zeros(n, dtype=bool)
    below[np.lexsort((ids, z))[: n // 2]] = True
    const = np.where(below, v["mortality.below.constant"], v["mortality.above.constant"])
    slope = np.where(below, v["mortality.below.slope"], v["mortality.above.slope"])
    death = gompertz_death_age_months(rng.uniforms(seed, "death", ids), ret, const, slope)

    for name, col in (("z", z), ("c1", c1), ("c2", c2), ("s_pre", s_pre)):
        bad = np.flatnonzero(~np.isfinite(col))
        if bad.size:
            raise GenerationError(f"non-finite {name} draw for worker id {int(ids[bad[0]])}")
    return Population(id=ids, gender=gender, dob_month=dob, z=z, c1=c1, c2=c2, s_pre=s_pre,
                      pfa=pfa, recipient=recipient, death_age_months=death)


@dataclass
class Shocks:
    """Treatment paths driving the planted responses in :func:`simulate_panel`.

    ``fee`` maps PFA -> per-period fee rates aligned with the panel periods.
    ``subsidy_from`` is the first period at which recipients face the implicit
    tax.  ``log_benefit`` is an optional per-worker shift of the log
    unconditional benefit from period ``benefit_from`` on.  ``benefit_level``
    is a per-worker change in annual retirement income for consumption.
    """

    fee: dict | None = None
    subsidy_from: int | None = None
    log_benefit: np.ndarray | None = None
    benefit_from: int | None = None
    benefit_level: np.ndarray | None = None
    noise_sd: float | None = None


def simulate_panel(pop: Population, policy: PolicyParams, behav: BehavioralParams, months,
                   shocks: Shocks | None = None, seed: int = 0, age_linear: float = 0.04,
                   age_quadratic: float = -0.0005, noise_sd: float = 0.1,
                   employment_rate: float = 1.0, career_months: int = 480,
                   retirement_consumption: bool = False) -> pd.DataFrame:
    """Monthly (or yearly) earnings panel with constant-elasticity responses.

    Log earnings are the worker's level log(z / career_months), a quadratic
    age profile, the planted responses to the net-of-tax rate, the benefit
    link and the unconditional benefit, and Gaussian noise.  Periods are month
    indices.  With ``retirement_consumption`` the consumption column is the
    retired-period flow c2 plus ``mpc`` times ``shocks.benefit_level``.
    """
    shocks = shocks or Shocks()
    periods = np.asarray(list(months), dtype=np.int64)
    n, t = len(pop), len(periods)
    if t == 0:
        raise GenerationError("empty period range")
    sd = noise_sd if shocks.noise_sd is None else shocks.noise_sd

    fee = np.zeros((n, t))
    if shocks.fee is not None:
        for k, path in shocks.fee.items():
            path = np.asarray(path, dtype=float)
            if path.shape != (t,):
                raise GenerationError(f"fee path of PFA {k} does not cover the panel periods")
            fee[pop.pfa == k] = path
        missing = ~np.isin(pop.pfa, list(shocks.fee))
        if missing.any():
            raise GenerationError("fee path missing for some PFA")
    net = 1.0 - policy.tau - policy.kappa - fee
    if np.any(net <= 0):
        raise GenerationError("negative net-of-tax rate")

    log_z = np.log(pop.z / career_months)[:, None] * np.ones((1, t))
    age_years = (periods[None, :] - pop.dob_month[:, None]) / 12.0
    log_z = log_z + age_linear * (age_years - 40.0) + age_quadratic * (age_years - 40.0) ** 2
    log_z = log_z + behav.eps_net_of_tax * np.log(net / net[:, :1])
    if shocks.subsidy_from is not None and policy.variant is Variant.CHILE:
        treated = pop.recipient[:, None] & (periods[None, :] >= shocks.subsidy_from)
        log_z = log_z + behav.eps_link * np.log(1.0 - policy.implicit_tax) * treated
    if shocks.log_benefit is not None:
        start = shocks.benefit_from if shocks.benefit_from is not None else periods[0]
        after = periods[None, :] >= start
        log_z = log_z - behav.eps_benefit * np.asarray(shocks.log_benefit)[:, None] * after

    ids = pop.id
    grid_ids = np.repeat(ids, t)
    counters = np.tile(periods, n)
    eps = rng.normals(seed, "panel_noise", grid_ids, counters).reshape(n, t) if sd > 0 else 0.0
    log_z = log_z + sd * eps
    employed = np.ones((n, t), dtype=bool)
    if employment_rate < 1.0:
        employed = rng.uniforms(seed, "employed", grid_ids, counters).reshape(n, t) < employment_rate
    earnings = np.where(employed, np.exp(log_z), 0.0)

    consumption = np.full((n, t), np.nan)
    if retirement_consumption:
        extra = np.zeros(n) if shocks.benefit_level is None else np.asarray(shocks.benefit_level)
        consumption = (pop.c2 + behav.mpc * extra)[:, None] * np.ones((1, t))

    return pd.DataFrame({
        "worker_id": grid_ids,
        "period": counters,
        "taxable_earnings": earnings.ravel(),
        "employed": employed.ravel(),
        "net_of_tax_rate": net.ravel(),
        "consumption": consumption.ravel(),
    })


def fee_paths(cfg: ScenarioConfig, periods) -> dict:
    periods = np.asarray(list(periods))
    out = {}
    for k in range(cfg["pfa.count"]):
        path = np.full(periods.shape, cfg["pfa.base_fee"], dtype=float)
        if k == cfg["pfa.treated"]:
            path = path + cfg["pfa.fee_change"] * (periods >= cfg["pfa.fee_change_month"])
        out[k] = path
    return out


def panel_to_csv(panel: pd.DataFrame, path_or_buf=None):
    from .population import month_label
    df = panel[PANEL_COLUMNS].copy()
    df["period"] = [month_label(int(p)) for p in df["period"]]
    df["employed"] = df["employed"].astype(int)
    return df.to_csv(path_or_buf, index=False, float_format="%.17g", lineterminator="\n")


def read_panel_csv(path_or_buf) -> pd.DataFrame:
    """Read a panel written by :func:`panel_to_csv`; ``#`` lines are comments."""
    df = pd.read_csv(path_or_buf, comment="#", dtype={"period": str}, float_precision="round_trip")
    missing = [c for c in PANEL_COLUMNS if c not in df.columns]
    if missing:
        raise GenerationError(f"panel is missing columns {missing}")
    df = df[PANEL_COLUMNS].copy()
    df["period"] = np.array([month_index(p) for p in df["period"]], dtype=np.int64)
    df["employed"] = df["employed"].astype(int).astype(bool)
    if df.duplicated(["worker_id", "period"]).any():
        raise GenerationError("duplicate (worker_id, period) rows")
    return df.reset_index(drop=True)
