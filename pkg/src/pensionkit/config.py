"""Scenario configuration: flat ``dotted.key = value`` files.

Every accepted key is listed in :data:`KEYS` with its type, default and a
one-line description; ``docs/config.md`` and ``pensionkit --help`` are
generated from that table.  Unknown keys are errors.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .core import BehavioralParams, PolicyError, PolicyParams
from .population import month_index, month_label

REQUIRED = object()


@dataclass(frozen=True)
class Key:
    kind: str
    default: Any
    doc: str
    check: Callable[[Any], str | None] | None = None


def _range(lo=None, hi=None, lo_open=False, hi_open=False):
    def check(v):
        if lo is not None and (v < lo or (lo_open and v == lo)):
            return f"must be {'>' if lo_open else '>='} {lo}"
        if hi is not None and (v > hi or (hi_open and v == hi)):
            return f"must be {'<' if hi_open else '<='} {hi}"
        return None
    return check


def _choice(*options):
    def check(v):
        return None if v in options else f"must be one of {', '.join(options)}"
    return check


KEYS: dict[str, Key] = {
    "seed": Key("int", None, "64-bit RNG seed (a --seed flag overrides it; one of the two is required)",
                _range(0, 2**64 - 1)),
    "n_workers": Key("int", REQUIRED, "number of synthetic workers", _range(1)),
    "dob.start": Key("month", "1945-01", "earliest date of birth (YYYY-MM)"),
    "dob.end": Key("month", "1975-12", "latest date of birth (YYYY-MM)"),
    "earnings_law.log_mean": Key("float", REQUIRED, "mean of log lifetime earnings z"),
    "earnings_law.log_sd": Key("float", REQUIRED, "sd of log lifetime earnings z", _range(0)),
    "consumption_link.c1_intercept": Key("float", 0.0, "E[log c1] at log z = 0"),
    "consumption_link.c1_slope": Key("float", 0.5, "slope of E[log c1] on log z"),
    "consumption_link.c1_noise_sd": Key("float", 0.2, "sd of log c1 noise", _range(0)),
    "consumption_link.drop_intercept": Key("float", 0.2, "E[log c1 - log c2] at log z = 0"),
    "consumption_link.drop_slope": Key("float", -0.08, "slope of the consumption drop on log z"),
    "consumption_link.drop_noise_sd": Key("float", 0.05, "sd of consumption-drop noise", _range(0)),
    "behavioral.eps_net_of_tax": Key("float", REQUIRED, "elasticity of z to the net-of-tax rate", _range(0)),
    "behavioral.eps_link": Key("float", REQUIRED, "elasticity of z to the benefit-earnings link", _range(0)),
    "behavioral.eps_benefit": Key("float", REQUIRED, "magnitude of the elasticity of z to the lump sum", _range(0)),
    "behavioral.mpc": Key("float", REQUIRED, "retirement MPC", _range(0, 1.5)),
    "behavioral.gamma": Key("float", REQUIRED, "relative risk aversion", _range(0, lo_open=True)),
    "behavioral.theta": Key("float", REQUIRED, "retirement state dependence", _range(0, 1, lo_open=True)),
    "behavioral.beta": Key("float", REQUIRED, "present-focus factor", _range(0, 1, lo_open=True)),
    "policy.kappa": Key("float", REQUIRED, "contribution rate", _range(0, 1)),
    "policy.phi": Key("float", REQUIRED, "benefit progressivity tax", _range(0, 1)),
    "policy.tau": Key("float", 0.0, "linear income tax", _range(0, 1, hi_open=True)),
    "policy.R": Key("float", 1.042, "gross return on pension savings", _range(0, lo_open=True)),
    "policy.E_bar": Key("float", 0.0, "exogenous pension spending per worker (per retirement year)"),
    "policy.variant": Key("str", "linear", "pension rule: linear or chile", _choice("linear", "chile")),
    "policy.pbs": Key("float", None, "basic subsidy at zero savings (chile only)", _range(0)),
    "policy.pmas": Key("float", None, "largest subsidized pension (chile only)", _range(0, lo_open=True)),
    "recipient.take_up": Key("float", 0.58, "probability that an eligible worker passes the means test",
                             _range(0, 1)),
    "retirement_age_months.F": Key("int", 720, "retirement age of women in months", _range(1)),
    "retirement_age_months.M": Key("int", 780, "retirement age of men in months", _range(1)),
    "crisis_window.start": Key("month", "2008-01", "first month of the crisis window"),
    "crisis_window.end": Key("month", "2009-02", "last month of the crisis window"),
    "fund_returns.start": Key("month", "1990-01", "first month covered by fund returns"),
    "fund_returns.end": Key("month", "2030-12", "last month covered by fund returns"),
    "fund_returns.B.normal": Key("float", 0.006, "monthly net return of fund B outside the crisis", _range(-1, lo_open=True)),
    "fund_returns.C.normal": Key("float", 0.005, "monthly net return of fund C outside the crisis", _range(-1, lo_open=True)),
    "fund_returns.D.normal": Key("float", 0.004, "monthly net return of fund D outside the crisis", _range(-1, lo_open=True)),
    "fund_returns.B.crisis": Key("float", -0.030, "monthly net return of fund B in the crisis", _range(-1, lo_open=True)),
    "fund_returns.C.crisis": Key("float", -0.020, "monthly net return of fund C in the crisis", _range(-1, lo_open=True)),
    "fund_returns.D.crisis": Key("float", -0.006, "monthly net return of fund D in the crisis", _range(-1, lo_open=True)),
    "fund_returns.file": Key("str", "", "optional CSV (month,B,C,D gross returns) replacing the parametric series"),
    "pfa.count": Key("int", 5, "number of pension fund administrators", _range(2)),
    "pfa.base_fee": Key("float", 0.0240, "payroll-equivalent fee of every PFA", _range(0, 1, hi_open=True)),
    "pfa.treated": Key("int", 0, "PFA whose fee changes", _range(0)),
    "pfa.fee_change_month": Key("month", "2010-08", "month of the fee change"),
    "pfa.fee_change": Key("float", -0.0189, "fee change of the treated PFA (fraction of payroll)"),
    "subsidy_intro_month": Key("month", "2008-07", "month the means-tested subsidy starts"),
    "treatment.confounding": Key("float", 0.0, "loading of treatment assignment on the earnings fixed effect"),
    "panel.age_linear": Key("float", 0.04, "age profile of log earnings: linear coefficient (per year)"),
    "panel.age_quadratic": Key("float", -0.0005, "age profile of log earnings: quadratic coefficient"),
    "panel.noise_sd": Key("float", 0.10, "sd of idiosyncratic log-earnings noise", _range(0)),
    "panel.employment_rate": Key("float", 1.0, "probability of being employed in a period", _range(0, 1)),
    "panel.career_months": Key("int", 480, "months of contributions that make up lifetime earnings z", _range(1)),
    "annuity_price": Key("float", 16.0, "savings needed per unit of annual pension", _range(0, lo_open=True)),
    "mortality.below.slope": Key("float", 0.027, "log mortality (percent) slope on age, below-median z"),
    "mortality.below.constant": Key("float", -1.746, "log mortality (percent) constant, below-median z"),
    "mortality.above.slope": Key("float", 0.019, "log mortality (percent) slope on age, above-median z"),
    "mortality.above.constant": Key("float", -1.258, "log mortality (percent) constant, above-median z"),
    "mortality.follow_up_years": Key("int", 15, "years after retirement with observed deaths", _range(1)),
    "welfare.numeraire": Key("str", "active", "money-metric unit: active (mean u'(c1)) or retirement (mean value of a retirement dollar)", _choice("active", "retirement")),
    "welfare.survival_weighting": Key("str", "off", "weight retirement terms by group life expectancy from the mortality coefficients", _choice("off", "on")),
    "optimizer.box.kappa": Key("str", "0.01,0.40", "search interval for kappa (lo,hi)"),
    "optimizer.box.phi": Key("str", "0.01,0.99", "search interval for phi (lo,hi)"),
    "optimizer.tol": Key("float", 1e-8, "FOC residual tolerance", _range(0, lo_open=True)),
    "optimizer.starts": Key("int", 5, "number of quasi-random starts", _range(1)),
    "bootstrap.replicates": Key("int", 200, "pairs-bootstrap replicates", _range(2)),
    "sweep.gamma": Key("str", "1,2,4,8", "grid for the gamma sweep"),
    "sweep.theta": Key("str", "0.62,0.7,0.81,0.9,1.0", "grid for the theta sweep"),
    "sweep.beta": Key("str", "0.6,0.7,0.8,0.9,1.0", "grid for the beta sweep"),
    "estimation.n_workers": Key("int", 50000, "workers per estimation design", _range(10)),
    "estimation.bandwidth": Key("float", 0.10, "bandwidth of the subsidy-threshold design", _range(0, 1, lo_open=True)),
    "estimation.sample": Key("str", "narrow", "crisis design sample: narrow or wide", _choice("narrow", "wide")),
    "link.gap_fraction": Key("float", 0.2, "capped-contribution gap between the two subsidy thresholds, as a fraction of PMAS times the annuity price, for a worker six years from retirement", _range(0, 1, lo_open=True, hi_open=True)),
}


class ConfigError(ValueError):
    def __init__(self, diagnostics):
        self.diagnostics = diagnostics
        super().__init__("; ".join(f"{d['key']}: {d['message']}" for d in diagnostics))


def _diag(key, message, line=None, severity="error"):
    d = {"key": key, "message": message, "severity": severity}
    if line is not None:
        d["line"] = line
    return d


def parse_text(text: str) -> tuple[dict[str, tuple[str, int]], list[dict]]:
    """Raw ``{key: (value, line)}`` and syntax diagnostics."""
    raw, diags = {}, []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            diags.append(_diag("", f"expected 'key = value', got {stripped!r}", lineno))
            continue
        key, value = (s.strip() for s in stripped.split("=", 1))
        if key in raw:
            diags.append(_diag(key, "duplicate key", lineno))
        raw[key] = (value, lineno)
    return raw, diags


def _convert(kind: str, value: str):
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    if kind == "month":
        return month_index(value)
    return value


def _typed(raw: dict) -> tuple[dict[str, Any], list[dict]]:
    values, diags = {}, []
    for key, (value, line) in raw.items():
        spec = KEYS.get(key)
        if spec is None:
            diags.append(_diag(key, "unknown key", line))
            continue
        try:
            v = _convert(spec.kind, value)
        except ValueError:
            diags.append(_diag(key, f"cannot parse {value!r} as {spec.kind}", line))
            continue
        if spec.kind == "float" and not np.isfinite(v):
            diags.append(_diag(key, "must be finite", line))
            continue
        if spec.check and (msg := spec.check(v)):
            diags.append(_diag(key, msg, line))
            continue
        values[key] = v
    for key, spec in KEYS.items():
        if key not in values and key not in raw:
            if spec.default is REQUIRED:
                diags.append(_diag(key, "missing required key"))
            else:
                values[key] = _convert(spec.kind, spec.default) if isinstance(spec.default, str) \
                    and spec.kind == "month" else spec.default
    return values, diags


def _cross_checks(v: dict) -> list[dict]:
    diags = []
    if "policy.kappa" in v and "policy.tau" in v and v["policy.kappa"] + v["policy.tau"] >= 1:
        diags.append(_diag("policy.tau", "kappa + tau must be < 1"))
    if v.get("policy.variant") == "chile":
        for k in ("policy.pbs", "policy.pmas"):
            if v.get(k) is None:
                diags.append(_diag(k, "required for the chile variant"))
        if v.get("policy.pbs") is not None and v.get("policy.pmas") is not None \
                and v["policy.pmas"] < v["policy.pbs"]:
            diags.append(_diag("policy.pmas", "must be >= policy.pbs"))
    elif v.get("policy.pbs") is not None or v.get("policy.pmas") is not None:
        diags.append(_diag("policy.pbs", "pbs/pmas only allowed for the chile variant"))
    if "crisis_window.start" in v and "crisis_window.end" in v \
            and v["crisis_window.end"] < v["crisis_window.start"]:
        diags.append(_diag("crisis_window.end", "crisis window is empty"))
    if "dob.start" in v and "dob.end" in v and v["dob.end"] < v["dob.start"]:
        diags.append(_diag("dob.end", "date-of-birth range is empty"))
    if v.get("pfa.treated", 0) >= v.get("pfa.count", 1):
        diags.append(_diag("pfa.treated", "must be < pfa.count"))
    fee = v.get("pfa.base_fee", 0.0)
    if not 0 <= fee + v.get("pfa.fee_change", 0.0) < 1:
        diags.append(_diag("pfa.fee_change", "fee rate after the change must be in [0, 1)"))
    for name in ("optimizer.box.kappa", "optimizer.box.phi", "sweep.gamma", "sweep.theta", "sweep.beta"):
        if name in v:
            try:
                vals = parse_list(v[name])
            except ValueError:
                diags.append(_diag(name, "expected comma-separated numbers"))
                continue
            if name.startswith("optimizer.box") and (len(vals) != 2 or not 0 <= vals[0] < vals[1] <= 1):
                diags.append(_diag(name, "expected lo,hi with 0 <= lo < hi <= 1"))
    if "fund_returns.start" in v and "fund_returns.end" in v:
        lo, hi = v["fund_returns.start"], v["fund_returns.end"]
        need_lo = min(v.get("crisis_window.start", lo), v.get("subsidy_intro_month", lo))
        need_hi = max(v.get("crisis_window.end", hi), v.get("pfa.fee_change_month", hi))
        if lo > need_lo or hi < need_hi:
            diags.append(_diag("fund_returns.end", "fund return series does not cover all simulated months"))
    return diags


def parse_list(text: str) -> list[float]:
    return [float(s) for s in str(text).split(",") if s.strip()]


@dataclass(frozen=True)
class ScenarioConfig:
    values: dict = field(repr=False)
    behavioral: BehavioralParams
    policy: PolicyParams
    digest: str

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int | None:
        return self.values["seed"]

    @property
    def n_workers(self) -> int:
        return self.values["n_workers"]

    def retirement_age_months(self, gender: str) -> int:
        return self.values[f"retirement_age_months.{gender}"]

    def with_overrides(self, overrides: dict) -> "ScenarioConfig":
        """New config with some dotted keys replaced."""
        return loads(render_values({**self.values, **overrides}))


def render_values(values: dict) -> str:
    lines = []
    for key in KEYS:
        v = values.get(key)
        if v is None:
            continue
        if KEYS[key].kind == "month":
            v = month_label(int(v))
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def validate_text(text: str) -> list[dict]:
    raw, diags = parse_text(text)
    values, more = _typed(raw)
    diags += more
    if not any(d["severity"] == "error" for d in diags):
        diags += _cross_checks(values)
    return diags


def validate_config(path: str | Path) -> list[dict]:
    """Diagnostics for a config file; empty iff the file is fully valid."""
    text = Path(path).read_text()
    return validate_text(text)


def loads(text: str) -> ScenarioConfig:
    raw, diags = parse_text(text)
    values, more = _typed(raw)
    diags += more
    if not diags:
        diags = _cross_checks(values)
    if diags:
        raise ConfigError(diags)
    try:
        behav = BehavioralParams(
            eps_net_of_tax=values["behavioral.eps_net_of_tax"], eps_link=values["behavioral.eps_link"],
            eps_benefit=values["behavioral.eps_benefit"], mpc=values["behavioral.mpc"],
            gamma=values["behavioral.gamma"], theta=values["behavioral.theta"],
            beta=values["behavioral.beta"])
        policy = PolicyParams(
            kappa=values["policy.kappa"], phi=values["policy.phi"], tau=values["policy.tau"],
            R=values["policy.R"], E_bar=values["policy.E_bar"], variant=values["policy.variant"],
            pbs=values["policy.pbs"], pmas=values["policy.pmas"])
    except PolicyError as exc:
        raise ConfigError([_diag("policy", str(exc))]) from None
    digest = hashlib.sha256(render_values(values).encode()).hexdigest()[:16]
    return ScenarioConfig(values=values, behavioral=behav, policy=policy, digest=digest)


def load_config(path: str | Path) -> ScenarioConfig:
    return loads(Path(path).read_text())


def config_reference_markdown() -> str:
    rows = ["| key | type | default | meaning |", "|---|---|---|---|"]
    for key, spec in KEYS.items():
        default = "required" if spec.default is REQUIRED else ("" if spec.default is None else spec.default)
        rows.append(f"| `{key}` | {spec.kind} | {default} | {spec.doc} |")
    return "\n".join(rows) + "\n"
