"""Identification designs and the synthetic data that exercise them.

Each ``simulate_*`` function builds a population and panel with planted
responses; the matching ``design_*`` function estimates them back using only
what an analyst would observe.  The planted value each design should recover
is returned by the ``implied_*`` helpers.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .. import rng
from ..config import ScenarioConfig
from ..core import BehavioralParams, PolicyParams, Variant, chile_subsidy, subsidy_thresholds
from ..popgen import (FundReturns, GenerationError, Shocks, fee_paths, generate_population,
                      glide_fifths, retirement_months_of, simulate_panel)
from ..population import Population, month_index
from .kernels import (EstimateTable, EstimationError, EventStudyResult, RegressionSpec,
                      demean, event_study, ols_fe, tsls, _codes)

# ---------------------------------------------------------------- crisis shock


def gfc_instrument(pop: Population, fund_returns: FundReturns, window: tuple[int, int],
                   annuity_price: float | None = None, cfg: ScenarioConfig | None = None
                   ) -> np.ndarray:
    """Pre-crisis savings carried through the crisis at the default fund mix.

    Each month's gross return is the glide-path-weighted average of the fund
    returns at the worker's age that month.  Dividing by ``annuity_price``
    expresses the result as an annual pension.
    """
    s_pre = np.asarray(pop.s_pre, dtype=float)
    if s_pre.size != len(pop) or not np.all(np.isfinite(s_pre)):
        raise EstimationError("missing pre-crisis savings")
    first, last = window
    r = fund_returns.window(first, last)
    months = np.arange(first, last + 1)
    age = months[None, :] - pop.dob_month[:, None]
    ret = retirement_months_of(pop.gender, cfg)[:, None]
    b, c, d = glide_fifths(np.maximum(age, 0), ret)
    gross = (b * r["B"][None, :] + c * r["C"][None, :] + d * r["D"][None, :]) / 5.0
    rho = s_pre * np.prod(gross, axis=1)
    return rho / annuity_price if annuity_price else rho


def _crisis_window(cfg: ScenarioConfig) -> tuple[int, int]:
    return cfg["crisis_window.start"], cfg["crisis_window.end"]


def _months_to_retirement(pop: Population, month: int, cfg: ScenarioConfig) -> np.ndarray:
    return pop.dob_month + retirement_months_of(pop.gender, cfg) - month


def crisis_sample(pop: Population, cfg: ScenarioConfig, sample: str) -> np.ndarray:
    """Mask of workers in a crisis-design sample.

    ``narrow``: at most ten years from retirement when the crisis starts, so
    the switch to fund D is under way; ``wide``: aged 30 or more and still
    working; ``placebo``: retiring in 2021-2024, whose savings sat entirely in
    fund C through the crisis.  Workers must still be working two years
    after the crisis ends.
    """
    start, end = _crisis_window(cfg)
    left = _months_to_retirement(pop, start, cfg)
    working = _months_to_retirement(pop, end + 25, cfg) > 0
    if sample == "narrow":
        return working & (left <= 120)
    if sample == "wide":
        return working & (start - pop.dob_month >= 360)
    if sample == "placebo":
        ret = pop.dob_month + retirement_months_of(pop.gender, cfg)
        return (ret >= month_index("2021-01")) & (ret <= month_index("2024-12"))
    raise EstimationError(f"unknown sample {sample!r}")


def _outcome_periods(cfg: ScenarioConfig) -> list[int]:
    start, end = _crisis_window(cfg)
    return [start - 24, start - 12, end + 1, end + 13]


def expected_pension(pop: Population, rho: np.ndarray, cfg: ScenarioConfig,
                     seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Planted annual pension and recipient flag for crisis-design workers.

    Savings after the crisis grow at the fund-D normal return until
    retirement, further contributions add ``kappa`` of monthly earnings, and
    the means-tested subsidy tops up low pensions.  The subsidy schedule is
    rescaled so that its ceiling sits at the 30th percentile of self-funded
    pensions, keeping the PBS/PMAS ratio of the configured policy.
    """
    policy = cfg.policy
    _, end = _crisis_window(cfg)
    left = np.maximum(_months_to_retirement(pop, end + 1, cfg), 0)
    growth = (1.0 + cfg["fund_returns.D.normal"]) ** left
    monthly = pop.z / cfg["panel.career_months"]
    future = policy.kappa * monthly * left
    price = cfg["annuity_price"]
    self_funded = (rho * price * growth + future) / price
    ratio = policy.pbs / policy.pmas if policy.variant is Variant.CHILE else 0.35
    pmas = float(np.quantile(self_funded, 0.3))
    schedule = PolicyParams(kappa=policy.kappa, phi=0.0, variant=Variant.CHILE, pbs=ratio * pmas, pmas=pmas)
    take = rng.uniforms(seed, "crisis_take_up", pop.id) < cfg["recipient.take_up"]
    recipient = take & (self_funded < pmas)
    pension = self_funded + np.where(recipient, chile_subsidy(self_funded, schedule), 0.0)
    return pension, recipient


def _crisis_population(cfg: ScenarioConfig, seed: int, n: int, sample: str) -> Population:
    start, _ = _crisis_window(cfg)
    f_ret, m_ret = cfg.retirement_age_months("F"), cfg.retirement_age_months("M")
    if sample == "placebo":
        lo = month_index("2021-01") - m_ret
        hi = month_index("2024-12") - f_ret
    elif sample == "narrow":
        lo, hi = start - m_ret + 25, start - f_ret + 120
    else:
        lo, hi = start - m_ret + 25, start - 360
    sub = cfg.with_overrides({"n_workers": n, "dob.start": lo, "dob.end": hi})
    return generate_population(sub, seed=seed)


def simulate_gfc(cfg: ScenarioConfig, seed: int, n: int | None = None, sample: str | None = None,
                 behav: BehavioralParams | None = None) -> tuple[Population, pd.DataFrame]:
    """Workers in a crisis sample and a yearly earnings panel around the crisis.

    Earnings after the crisis respond to the log of the planted pension with
    elasticity ``-eps_benefit``.  The panel carries ``pension`` and ``rho``
    (the instrument, annuity-normalized) per worker.
    """
    n = n or cfg["estimation.n_workers"]
    sample = sample or cfg["estimation.sample"]
    behav = behav or cfg.behavioral
    pop = _crisis_population(cfg, seed, n, sample)
    pop = pop.take(np.flatnonzero(crisis_sample(pop, cfg, sample)))
    rho = gfc_instrument(pop, FundReturns.from_config(cfg), _crisis_window(cfg),
                         cfg["annuity_price"], cfg)
    pension, recipient = expected_pension(pop, rho, cfg, seed)
    pop = pop.replace_columns(recipient=recipient)
    _, end = _crisis_window(cfg)
    shocks = Shocks(log_benefit=np.log(pension), benefit_from=end + 1)
    panel = simulate_panel(pop, replace(cfg.policy, variant=Variant.LINEAR, pbs=None, pmas=None),
                           behav, _outcome_periods(cfg), shocks, seed=seed,
                           age_linear=cfg["panel.age_linear"], age_quadratic=cfg["panel.age_quadratic"],
                           noise_sd=cfg["panel.noise_sd"], career_months=cfg["panel.career_months"])
    per = pd.DataFrame({"worker_id": pop.id, "pension": pension, "rho": rho})
    return pop, panel.merge(per, on="worker_id", how="left")


def _worker_frame(pop: Population, cfg: ScenarioConfig, month: int) -> pd.DataFrame:
    return pd.DataFrame({
        "worker_id": pop.id,
        "female": (pop.gender == "F").astype(float),
        "dob_year": pop.dob_month // 12,
        "dob_month": pop.dob_month,
        "cell": np.char.add(pop.gender.astype(str), pop.dob_month.astype(str)),
        "age_months": (month - pop.dob_month).astype(float),
        "log_s_pre": np.log(pop.s_pre),
        "s_pre": pop.s_pre,
    })


def _identified(df: pd.DataFrame, controls: list[str], fe: str) -> list[str]:
    """Drop controls that are constant within every level of ``fe``."""
    keep = []
    for c in controls:
        if df.groupby(fe)[c].nunique().max() > 1:
            keep.append(c)
    return keep


def earnings_change(panel: pd.DataFrame, split: int) -> pd.DataFrame:
    """Mean log earnings from ``split`` on minus mean before, per worker."""
    df = panel[panel["taxable_earnings"] > 0]
    log_e = np.log(df["taxable_earnings"].to_numpy())
    post = df["period"].to_numpy() >= split
    frame = pd.DataFrame({"worker_id": df["worker_id"].to_numpy(), "post": post, "y": log_e})
    means = frame.groupby(["worker_id", "post"])["y"].mean().unstack()
    if not {False, True} <= set(means.columns):
        raise EstimationError("panel lacks periods on both sides of the split")
    out = (means[True] - means[False]).dropna()
    return out.rename("dy").reset_index()


def design_benefit_elasticity(pop: Population, panel: pd.DataFrame, cfg: ScenarioConfig) -> dict:
    """Earnings response to the future pension, instrumented by the crisis loss.

    First stage: log pension on log instrument.  Second stage: change in log
    earnings across the crisis on the instrumented log pension.  Both control
    for birth-year effects, gender, linear age in months and log pre-crisis
    savings, and cluster by gender and birth month.  The second-stage
    coefficient estimates ``-eps_benefit``.
    """
    start, end = _crisis_window(cfg)
    dy = earnings_change(panel, end + 1)
    per = panel.groupby("worker_id")[["pension", "rho"]].first().reset_index()
    df = _worker_frame(pop, cfg, start).merge(per, on="worker_id").merge(dy, on="worker_id")
    df["log_p"] = np.log(df["pension"])
    df["log_rho"] = np.log(df["rho"])
    controls = ["female", "age_months", "log_s_pre"]
    first = ols_fe(df, RegressionSpec("log_p", ["log_rho", *controls], fixed_effects=["dob_year"],
                                      cluster="cell"))
    second = tsls(df, RegressionSpec("dy", ["log_p", *controls], instruments=["log_rho"],
                                     endogenous=["log_p"], fixed_effects=["dob_year"], cluster="cell"))
    return {"first_stage": first, "second_stage": second}


def design_crisis_placebo(pop: Population, panel: pd.DataFrame, cfg: ScenarioConfig) -> EstimateTable:
    """Reduced form for cohorts with no glide-path heterogeneity in the crisis.

    The older half of each gender by age (ties by id) is ``high``; the
    coefficient on ``high`` in the change in log earnings should be zero.
    """
    start, end = _crisis_window(cfg)
    dy = earnings_change(panel, end + 1)
    df = _worker_frame(pop, cfg, start).merge(dy, on="worker_id")
    high = np.zeros(len(df))
    for female in (0.0, 1.0):
        idx = np.flatnonzero(df["female"].to_numpy() == female)
        order = np.lexsort((df["worker_id"].to_numpy()[idx], -df["age_months"].to_numpy()[idx]))
        high[idx[order[: len(idx) // 2]]] = 1.0
    df["post_x_high"] = high
    return ols_fe(df, RegressionSpec("dy", ["post_x_high", "female", "age_months", "log_s_pre"],
                                     cluster="cell"))


# ------------------------------------------------------------------ MPC design


def simulate_mpc(cfg: ScenarioConfig, seed: int, n: int | None = None,
                 behav: BehavioralParams | None = None) -> tuple[Population, pd.DataFrame]:
    """Retirees whose pensions were hit by the crisis, with consumption.

    The pension adds other retirement income ``v`` (independent of savings
    and age) to the crisis-hit pension.  Consumption is a base linear in
    pre-crisis savings, plus ``mpc`` times the pension, plus a further
    ``0.3 v``, plus noise; ``v`` makes the pension endogenous while the
    crisis loss stays a valid instrument.
    """
    n = n or cfg["estimation.n_workers"]
    behav = behav or cfg.behavioral
    pop = _crisis_population(cfg, seed, n, "narrow")
    pop = pop.take(np.flatnonzero(crisis_sample(pop, cfg, "narrow")))
    rho = gfc_instrument(pop, FundReturns.from_config(cfg), _crisis_window(cfg),
                         cfg["annuity_price"], cfg)
    pension, recipient = expected_pension(pop, rho, cfg, seed)
    scale = float(np.mean(pension))
    other = 0.1 * scale * np.exp(0.5 * rng.normals(seed, "mpc_other", pop.id))
    pension = pension + other
    noise = rng.normals(seed, "mpc_noise", pop.id)
    base = 0.5 * scale + 2.0 * pop.s_pre / cfg["annuity_price"] + 0.3 * other
    consumption = base + behav.mpc * pension + 0.05 * scale * noise
    pop = pop.replace_columns(recipient=recipient)
    frame = pd.DataFrame({"worker_id": pop.id, "pension": pension, "rho": rho,
                          "consumption": consumption})
    return pop, frame


def design_mpc(pop: Population, panel: pd.DataFrame, cfg: ScenarioConfig) -> dict:
    """Retirement consumption on the pension in levels, instrumented by the crisis loss."""
    start, _ = _crisis_window(cfg)
    df = _worker_frame(pop, cfg, start).merge(panel, on="worker_id")
    df["s_pre_annuity"] = df["s_pre"] / cfg["annuity_price"]
    controls = ["female", "age_months", "s_pre_annuity"]
    first = ols_fe(df, RegressionSpec("pension", ["rho", *controls], fixed_effects=["dob_year"],
                                      cluster="cell"))
    second = tsls(df, RegressionSpec("consumption", ["pension", *controls], instruments=["rho"],
                                     endogenous=["pension"], fixed_effects=["dob_year"], cluster="cell"))
    return {"first_stage": first, "second_stage": second}


# --------------------------------------------------------- subsidy thresholds

LINK_HORIZON = 72


def link_returns(cfg: ScenarioConfig, months_left: int) -> np.ndarray:
    intro = cfg["subsidy_intro_month"]
    fr = FundReturns.from_config(cfg)
    return fr.window(intro, intro + months_left - 1)["D"] - 1.0


def link_contribution_cap(cfg: ScenarioConfig) -> float:
    """Monthly contribution cap implied by ``link.gap_fraction``.

    The cap is set so that, for a worker ``LINK_HORIZON`` months from
    retirement, contributing at the cap adds ``gap_fraction`` of PMAS times
    the annuity price to savings at retirement.
    """
    pmas, price = cfg.policy.pmas, cfg["annuity_price"]
    r = link_returns(cfg, LINK_HORIZON)
    unit = subsidy_thresholds(pmas, price, r, np.ones(LINK_HORIZON))
    per_unit_cap = (unit["a_upper"] - unit["a_lower"]) * np.prod(1.0 + r)
    return cfg["link.gap_fraction"] * pmas * price / per_unit_cap


def worker_thresholds(pop: Population, cfg: ScenarioConfig, pmas_scale: float = 1.0) -> pd.DataFrame:
    """Always- and never-recipient savings bounds for each worker."""
    intro = cfg["subsidy_intro_month"]
    left = _months_to_retirement(pop, intro, cfg)
    if np.any(left <= 0):
        raise EstimationError("link sample includes retired workers")
    cap = link_contribution_cap(cfg)
    pmas = cfg.policy.pmas * pmas_scale
    lo, hi = np.empty(len(pop)), np.empty(len(pop))
    for m in np.unique(left):
        th = subsidy_thresholds(pmas, cfg["annuity_price"], link_returns(cfg, int(m)), np.full(int(m), cap))
        sel = left == m
        lo[sel], hi[sel] = th["a_lower"], th["a_upper"]
    return pd.DataFrame({"worker_id": pop.id, "a_lower": lo, "a_upper": hi, "months_left": left})


def _self_funded(savings, thresholds: pd.DataFrame, cfg: ScenarioConfig, share) -> np.ndarray:
    """Pension financed by savings plus contributions at ``share`` of the cap."""
    price = cfg["annuity_price"]
    growth = price * cfg.policy.pmas / thresholds["a_upper"].to_numpy()
    capped = (thresholds["a_upper"] - thresholds["a_lower"]).to_numpy() * growth
    return (np.asarray(savings) * growth + share * capped) / price


def simulate_link(cfg: ScenarioConfig, seed: int, n: int | None = None,
                  behav: BehavioralParams | None = None) -> tuple[Population, pd.DataFrame]:
    """Workers 25 to 72 months from retirement when the subsidy starts.

    Savings at the introduction (stored as ``s_pre``) are uniform on
    0.6 to 1.4 times the never-recipient bound.  Workers contribute a uniform
    0.3 to 0.7 share of the cap, so the true eligibility switch lies strictly
    between the two thresholds.  Recipients take up with the configured
    probability; from the introduction on their earnings respond to the lower
    benefit-earnings link and to the subsidy's share of their pension.
    """
    if cfg.policy.variant is not Variant.CHILE:
        raise GenerationError("the threshold design needs the chile variant")
    n = n or cfg["estimation.n_workers"]
    behav = behav or cfg.behavioral
    intro = cfg["subsidy_intro_month"]
    pop = generate_population(cfg.with_overrides({"n_workers": n}), seed=seed)
    ids = pop.id
    left = 25 + rng.integers(seed, "link_left", ids, LINK_HORIZON - 24)
    dob = intro - retirement_months_of(pop.gender, cfg) + left
    pop = pop.replace_columns(dob_month=dob)
    th = worker_thresholds(pop, cfg)
    savings = th["a_upper"].to_numpy() * (0.6 + 0.8 * rng.uniforms(seed, "link_savings", ids))
    share = 0.3 + 0.4 * rng.uniforms(seed, "link_share", ids)
    own = _self_funded(savings, th, cfg, share)
    take = rng.uniforms(seed, "link_take_up", ids) < cfg["recipient.take_up"]
    recipient = take & (own < cfg.policy.pmas)
    subsidy_share = np.log1p(chile_subsidy(own, cfg.policy) / own)
    pop = pop.replace_columns(s_pre=savings, recipient=recipient)
    shocks = Shocks(subsidy_from=intro, log_benefit=np.where(recipient, subsidy_share, 0.0),
                    benefit_from=intro)
    months = [intro - 24, intro - 12, intro, intro + 12]
    panel = simulate_panel(pop, cfg.policy, behav, months, shocks, seed=seed,
                           age_linear=cfg["panel.age_linear"], age_quadratic=cfg["panel.age_quadratic"],
                           noise_sd=cfg["panel.noise_sd"], career_months=cfg["panel.career_months"])
    extra = pd.DataFrame({"worker_id": ids, "contribution_share": share, "subsidy_share": subsidy_share})
    return pop, panel.merge(extra, on="worker_id", how="left")


def _link_frame(pop: Population, panel: pd.DataFrame, cfg: ScenarioConfig, pmas_scale: float,
                bandwidth: float) -> pd.DataFrame:
    intro = cfg["subsidy_intro_month"]
    th = worker_thresholds(pop, cfg, pmas_scale)
    df = _worker_frame(pop, cfg, intro).merge(th, on="worker_id")
    df["a"] = pop.s_pre
    df["m"] = (df["a"] - df["a_lower"]) / (df["a_upper"] - df["a_lower"])
    df["recipient"] = pop.recipient.astype(float)
    below = (df["m"] >= -bandwidth) & (df["m"] < 0)
    above = (df["m"] > 1) & (df["m"] <= 1 + bandwidth)
    df = df[below | above].copy()
    if not below.any() or not above.any():
        raise EstimationError("empty treated or control cell")
    df["always_below"] = (df["m"] < 0).astype(float)
    # quartic in savings, centred and scaled for conditioning
    dev = df["a"] / df["a"].mean() - 1.0
    for k in range(1, 5):
        df[f"a{k}"] = dev ** k
    return df


def design_link_elasticity(pop: Population, panel: pd.DataFrame, cfg: ScenarioConfig,
                           pmas_scale: float = 1.0, bandwidth: float | None = None) -> dict:
    """Recipient effect on earnings around the subsidy thresholds.

    Savings are normalized as ``m = (a - a_lower) / (a_upper - a_lower)``;
    workers with ``m`` in ``[-bw, 0)`` always qualify on savings and those in
    ``(1, 1 + bw]`` never do.  First stage: recipient status on the
    always-below indicator.  Second stage: change in log earnings around the
    introduction on instrumented recipient status.  Both control for
    birth-year effects, gender (when not absorbed by them) and a quartic in
    savings ``a``, clustering by birth month.

    Plant-to-coefficient mapping: a recipient's log earnings shift by
    ``eps_link * log(1 - pbs/pmas) - eps_benefit * s`` with ``s`` the log
    ratio of total to self-funded pension; the second stage recovers the
    mean of that shift over recipients in the always-below cell (see
    :func:`implied_link_effect`).  ``disentangled`` adds the interaction with
    ``s``: its recipient coefficient divided by ``log(1 - pbs/pmas)``
    estimates ``eps_link`` and the interaction estimates ``-eps_benefit``.
    ``pmas_scale`` moves both thresholds as if PMAS were rescaled (placebo).
    """
    bw = cfg["estimation.bandwidth"] if bandwidth is None else bandwidth
    intro = cfg["subsidy_intro_month"]
    df = _link_frame(pop, panel, cfg, pmas_scale, bw)
    dy = earnings_change(panel, intro)
    controls = _identified(df, ["female", "a1", "a2", "a3", "a4"], "dob_year")
    first = ols_fe(df, RegressionSpec("recipient", ["always_below", *controls],
                                      fixed_effects=["dob_year"], cluster="dob_month"))
    out = {"first_stage": first}
    if pmas_scale != 1.0:
        return out
    df = df.merge(dy, on="worker_id")
    second = tsls(df, RegressionSpec("dy", ["recipient", *controls], instruments=["always_below"],
                                     endogenous=["recipient"], fixed_effects=["dob_year"],
                                     cluster="dob_month"))
    out["second_stage"] = second
    if "subsidy_share" in panel.columns:
        share = panel.groupby("worker_id")["subsidy_share"].first()
        df["s"] = share.reindex(df["worker_id"]).to_numpy()
        df["recipient_x_s"] = df["recipient"] * df["s"]
        df["below_x_s"] = df["always_below"] * df["s"]
        dis = tsls(df, RegressionSpec("dy", ["recipient", "recipient_x_s", *controls],
                                      instruments=["always_below", "below_x_s"],
                                      endogenous=["recipient", "recipient_x_s"],
                                      fixed_effects=["dob_year"], cluster="dob_month"))
        log_net = np.log(1.0 - cfg.policy.implicit_tax)
        g0 = dis["recipient"]
        out["disentangled"] = dis
        out["eps_link"] = {"estimate": g0.estimate / log_net, "se": g0.se / abs(log_net)}
        out["eps_benefit"] = {"estimate": -dis["recipient_x_s"].estimate, "se": dis["recipient_x_s"].se}
    return out


def implied_link_effect(pop: Population, panel: pd.DataFrame, cfg: ScenarioConfig,
                        behav: BehavioralParams | None = None, bandwidth: float | None = None) -> float:
    """Planted mean log-earnings shift of recipients in the always-below cell."""
    behav = behav or cfg.behavioral
    bw = cfg["estimation.bandwidth"] if bandwidth is None else bandwidth
    df = _link_frame(pop, panel, cfg, 1.0, bw)
    share = panel.groupby("worker_id")["subsidy_share"].first()
    cell = df[(df["m"] < 0) & (df["recipient"] > 0)]
    s = share.reindex(cell["worker_id"]).to_numpy()
    log_net = np.log(1.0 - cfg.policy.implicit_tax)
    return float(np.mean(behav.eps_link * log_net - behav.eps_benefit * s))


# ----------------------------------------------------------------- fee change


def fee_window(cfg: ScenarioConfig, half: int = 48) -> range:
    change = cfg["pfa.fee_change_month"]
    return range(change - half, change + half)


def simulate_fee_panel(cfg: ScenarioConfig, seed: int, n: int | None = None,
                       behav: BehavioralParams | None = None) -> tuple[Population, pd.DataFrame]:
    """Monthly panel over a symmetric 48-month window around the fee change.

    Workers are born so that they joined before 2008 and work through the
    window.
    """
    n = n or cfg["estimation.n_workers"]
    behav = behav or cfg.behavioral
    months = fee_window(cfg)
    lo = months[-1] + 1 - cfg.retirement_age_months("F")
    hi = month_index("2008-01") - 241
    pop = generate_population(cfg.with_overrides({"n_workers": n, "dob.start": lo, "dob.end": hi}), seed=seed)
    panel = simulate_panel(pop, replace(cfg.policy, variant=Variant.LINEAR, pbs=None, pmas=None),
                           behav, months, Shocks(fee=fee_paths(cfg, months)), seed=seed,
                           age_linear=cfg["panel.age_linear"], age_quadratic=cfg["panel.age_quadratic"],
                           noise_sd=cfg["panel.noise_sd"], employment_rate=cfg["panel.employment_rate"],
                           career_months=cfg["panel.career_months"])
    return pop, panel


def treatment_timing(panel: pd.DataFrame) -> pd.Series:
    """Month of each worker's net-of-tax change (NaN if none).

    Raises when a worker's rate changes more than once.
    """
    df = panel.sort_values(["worker_id", "period"], kind="stable")
    rate = df["net_of_tax_rate"].to_numpy()
    wid = df["worker_id"].to_numpy()
    same = np.concatenate([[False], wid[1:] == wid[:-1]])
    change = same & (rate != np.roll(rate, 1))
    counts = pd.Series(change).groupby(wid).sum()
    if (counts > 1).any():
        raise EstimationError("multiple fee changes in window")
    when = pd.Series(df["period"].to_numpy()[change], index=wid[change])
    return when.reindex(counts.index)


def design_net_of_tax(panel: pd.DataFrame, cfg: ScenarioConfig, pop: Population | None = None,
                      trends: bool = False, bin_width: int = 12) -> dict:
    """Earnings elasticity to the net-of-tax rate from the fee change.

    Log earnings on the log net-of-tax rate with worker and month effects
    (worker effects absorb the administrator effect), clustered by worker.
    With ``pop`` the sample keeps workers who joined before 2008.  ``trends``
    adds a treated-group linear trend.  The event-study companion uses
    ``bin_width``-month bins with the year before the change omitted.
    """
    months = fee_window(cfg)
    df = panel[(panel["period"] >= months[0]) & (panel["period"] <= months[-1])]
    if pop is not None:
        joined = pd.Series(pop.dob_month + 240 < month_index("2008-01"), index=pop.id)
        df = df[joined.reindex(df["worker_id"]).to_numpy()]
    df = df[df["employed"] & (df["taxable_earnings"] > 0)]
    timing = treatment_timing(df)
    treated_at = timing.reindex(df["worker_id"]).to_numpy()
    df = pd.DataFrame({
        "worker_id": df["worker_id"].to_numpy(),
        "period": df["period"].to_numpy(),
        "log_earnings": np.log(df["taxable_earnings"].to_numpy()),
        "log_net": np.log(df["net_of_tax_rate"].to_numpy()),
        "event": df["period"].to_numpy() - treated_at,
    })
    regressors = ["log_net"]
    if trends:
        treated = np.isfinite(treated_at)
        df["treated_trend"] = np.where(treated, (df["period"] - months[0]) / 12.0, 0.0)
        regressors.append("treated_trend")
    did = ols_fe(df, RegressionSpec("log_earnings", regressors, fixed_effects=["worker_id", "period"],
                                    cluster="worker_id"))
    half = len(months) // 2
    dyn = event_study(df, RegressionSpec("log_earnings", [], fixed_effects=["worker_id", "period"],
                                         cluster="worker_id"),
                      "event", (-half, half - 1), -1, bin_width)
    return {"did": did, "dynamics": dyn}


# ---------------------------------------------------------- consumption drops


def simulate_consumption_survey(cfg: ScenarioConfig, seed: int, n: int = 4000,
                                income_slope: float = 0.4, extra_drop_slope: float = 0.0,
                                income_weight: float = 0.5, years=(2000, 2019)) -> pd.DataFrame:
    """Yearly household survey around retirement.

    Log income falls at retirement by a replacement rate that rises with
    lifetime earnings (``income_slope`` per log point).  Log consumption
    loads ``income_weight`` on log income, plus a common extra drop whose
    dependence on log earnings is ``extra_drop_slope``, household size,
    year and cohort effects and noise.  Retirement ages vary by two years
    around the statutory age.
    """
    pop = generate_population(cfg.with_overrides({"n_workers": n, "dob.start": month_index("1935-01"),
                                                  "dob.end": month_index("1960-12")}), seed=seed)
    ids = pop.id
    ret_age = retirement_months_of(pop.gender, cfg) // 12 + rng.integers(seed, "survey_ret", ids, 5) - 2
    birth = pop.dob_month // 12
    ret_year = birth + ret_age
    yrs = np.arange(years[0], years[1] + 1)
    n_y = len(yrs)
    wid = np.repeat(ids, n_y)
    year = np.tile(yrs, len(pop))
    event = year - np.repeat(ret_year, n_y)
    log_z = np.log(pop.z)
    dev = np.repeat(log_z - log_z.mean(), n_y)
    post = (event >= 0).astype(float)
    replacement = -0.4 + income_slope * dev
    ctr = year.astype(np.int64)
    log_income = dev + np.log(0.5) + post * replacement + 0.1 * rng.normals(seed, "survey_income", wid, ctr)
    hh = 1 + rng.integers(seed, "survey_hh", wid, 4, ctr)
    alpha = np.repeat(0.2 * rng.normals(seed, "survey_alpha", ids), n_y)
    year_fx = 0.01 * (year - years[0])
    cohort_fx = 0.005 * (np.repeat(birth, n_y) - 1945)
    extra = post * (-0.05 + extra_drop_slope * dev)
    log_c = (alpha + income_weight * log_income + 0.05 * hh + year_fx + cohort_fx + extra
             + 0.08 * rng.normals(seed, "survey_c", wid, ctr))
    return pd.DataFrame({
        "worker_id": wid, "year": year, "cohort": np.repeat(birth, n_y),
        "gender": np.repeat(pop.gender, n_y), "z": np.repeat(pop.z, n_y),
        "event_year": event, "hh_size": hh.astype(float), "log_income": log_income, "log_c": log_c,
    })


@dataclass
class ConsumptionResult:
    paths: dict
    gap: pd.DataFrame
    gap_wald: float
    gap_p: float
    binned: pd.DataFrame
    quadratic: np.ndarray

    def as_dict(self) -> dict:
        return {"paths": {k: v.path.to_dict(orient="list") for k, v in self.paths.items()},
                "gap": self.gap.to_dict(orient="list"), "gap_wald": self.gap_wald,
                "gap_p": self.gap_p, "binned": self.binned.to_dict(orient="list"),
                "quadratic": self.quadratic.tolist()}


def _detrend(path: pd.DataFrame, omit: int) -> pd.DataFrame:
    pre = path[path["event_time"] <= omit]
    if len(pre) < 2:
        return path.copy()
    slope, icept = np.polyfit(pre["event_time"], pre["estimate"], 1)
    out = path.copy()
    trend = icept + slope * out["event_time"]
    for col in ("estimate", "ci_lo", "ci_hi"):
        out[col] = out[col] - trend
    return out


def consumption_event_study(survey: pd.DataFrame, grouping: str = "cohort_gender_mean",
                            window: tuple[int, int] = (-9, 8), bin_width: int = 3,
                            control_income: bool = False, detrend: bool = False,
                            n_bins: int = 52) -> ConsumptionResult:
    """Consumption paths around retirement for below- and above-mean earners.

    Groups split at the cohort-by-gender mean of lifetime earnings.  Each
    group's path has year and cohort effects and household size controls,
    3-year event bins and the bin containing t = -1 omitted; errors cluster by
    household.  ``control_income`` adds log income; ``detrend`` removes a
    line fitted through the pre-period coefficients.  The binned curve is the
    mean change in residual log consumption per equal-count earnings bin,
    with a quadratic fit.
    """
    if grouping != "cohort_gender_mean":
        raise EstimationError(f"unknown grouping {grouping!r}")
    df = survey.copy()
    mean_z = df.groupby(["cohort", "gender"])["z"].transform("mean")
    df["group"] = np.where(df["z"] < mean_z, "below", "above")
    regs = ["hh_size"] + (["log_income"] if control_income else [])
    spec = RegressionSpec("log_c", regs, fixed_effects=["year", "cohort"], cluster="worker_id")
    omit = int(np.floor(-1 / bin_width) * bin_width)
    paths, unbalanced = {}, {}
    for g in ("below", "above"):
        res = event_study(df[df["group"] == g], spec, "event_year", window, -1, bin_width)
        if detrend:
            res = EventStudyResult(_detrend(res.path, omit), res.pre_wald, res.pre_df, res.pre_p,
                                   res.table, res.empty_bins)
        paths[g] = res
    a, b = paths["below"].path, paths["above"].path
    gap = pd.DataFrame({"event_time": a["event_time"], "gap": a["estimate"] - b["estimate"],
                        "se": np.sqrt(a["se"] ** 2 + b["se"] ** 2)})
    free = gap[gap["se"] > 0]
    wald = float(np.sum((free["gap"] / free["se"]) ** 2))
    from scipy.stats import chi2
    p = float(chi2.sf(wald, len(free)))

    within = demean(df[["log_c", *regs]].to_numpy(dtype=float),
                    [_codes(df["year"])[0], _codes(df["cohort"])[0]])
    coef = np.linalg.lstsq(within[:, 1:], within[:, 0], rcond=None)[0]
    df["resid"] = within[:, 0] - within[:, 1:] @ coef
    lo, hi = window
    inside = df[(df["event_year"] >= lo) & (df["event_year"] <= hi)]
    per = inside.assign(post=inside["event_year"] >= 0).groupby(["worker_id", "post"])["resid"].mean().unstack()
    per = per.dropna()
    drops = pd.DataFrame({"worker_id": per.index, "drop": (per[False] - per[True]).to_numpy()})
    z = df.groupby("worker_id")["z"].first()
    drops["z"] = z.reindex(drops["worker_id"]).to_numpy()
    order = np.lexsort((drops["worker_id"].to_numpy(), drops["z"].to_numpy()))
    bins = np.empty(len(drops), dtype=int)
    bins[order] = np.arange(len(drops)) * n_bins // len(drops)
    binned = drops.assign(bin=bins).groupby("bin").agg(z=("z", "mean"), drop=("drop", "mean"),
                                                       n=("drop", "size")).reset_index()
    quad = np.polyfit(binned["z"], binned["drop"], 2)[::-1]
    return ConsumptionResult(paths, gap, wald, p, binned, quad)
