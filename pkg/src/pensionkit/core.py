"""Pension rule, preferences and earnings responses.

Everything here is a pure function of its arguments.  Currency amounts are
whatever unit the caller uses; only ratios matter to the welfare engine.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np


class Variant(str, Enum):
    LINEAR = "linear"
    CHILE = "chile"


class Reform(str, Enum):
    KAPPA = "kappa"
    PHI = "phi"


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyParams:
    """Pension-system parameters.

    ``kappa`` is the contribution rate, ``phi`` the linear tax on the
    self-funded pension whose revenue is paid back as a lump sum, ``tau`` the
    linear income tax and ``R`` the gross return on contributions.  The Chile
    variant adds a means-tested subsidy ``max(0, pbs * (1 - a / pmas))``.
    """

    kappa: float
    phi: float
    tau: float = 0.0
    R: float = 1.042
    E_bar: float = 0.0
    variant: Variant = Variant.LINEAR
    pbs: float | None = None
    pmas: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        problems = []
        if not 0.0 <= self.kappa <= 1.0:
            problems.append(f"kappa={self.kappa} outside [0, 1]")
        if not 0.0 <= self.phi <= 1.0:
            problems.append(f"phi={self.phi} outside [0, 1]")
        if not 0.0 <= self.tau < 1.0:
            problems.append(f"tau={self.tau} outside [0, 1)")
        if self.kappa + self.tau >= 1.0:
            problems.append("kappa + tau must be < 1")
        if not self.R > 0:
            problems.append(f"R={self.R} must be positive")
        if self.variant is Variant.CHILE:
            if self.pbs is None or self.pmas is None:
                problems.append("chile variant requires pbs and pmas")
            elif self.pbs < 0 or self.pmas < self.pbs:
                problems.append("need 0 <= pbs <= pmas")
        elif self.pbs is not None or self.pmas is not None:
            problems.append("pbs/pmas are only allowed for the chile variant")
        if problems:
            raise PolicyError("; ".join(problems))

    @property
    def implicit_tax(self) -> float:
        """PBS/PMAS, the phase-out rate of the subsidy (0 for Linear)."""
        if self.variant is Variant.CHILE and self.pmas:
            return self.pbs / self.pmas
        return 0.0

    @property
    def net_of_tax(self) -> float:
        return 1.0 - self.tau - self.kappa

    @property
    def link(self) -> float:
        """Benefit-earnings slope m = kappa * (1 - phi)."""
        return self.kappa * (1.0 - self.phi)

    def with_design(self, kappa: float, phi: float) -> "PolicyParams":
        return replace(self, kappa=kappa, phi=phi)


@dataclass(frozen=True)
class BehavioralParams:
    """Elasticities, retirement MPC and preference parameters.

    ``eps_benefit`` is stored as a non-negative magnitude; earnings *fall*
    when the unconditional benefit rises, and every formula applies that sign.
    """

    eps_net_of_tax: float = 0.38
    eps_link: float = 0.22
    eps_benefit: float = 0.11
    mpc: float = 0.79
    gamma: float = 4.0
    theta: float = 0.62
    beta: float = 0.82

    def __post_init__(self):
        problems = []
        for name in ("eps_net_of_tax", "eps_link", "eps_benefit"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if not 0.0 <= self.mpc <= 1.5:
            problems.append("mpc outside [0, 1.5]")
        if not self.gamma > 0:
            problems.append("gamma must be > 0")
        if not 0.0 < self.theta <= 1.0:
            problems.append("theta outside (0, 1]")
        if not 0.0 < self.beta <= 1.0:
            problems.append("beta outside (0, 1]")
        if problems:
            raise PolicyError("; ".join(problems))

    @staticmethod
    def delta(R: float) -> float:
        """Planner time discount; tied to the pension return (delta * R = 1)."""
        return 1.0 / R


def linear_benefit(z, policy: PolicyParams, z_bar: float | None):
    """Self-funded pension, lump sum and total under the linear rule."""
    if z_bar is None:
        raise PolicyError("linear_benefit needs the population mean z_bar")
    z = np.asarray(z, dtype=float)
    self_funded = (1.0 - policy.phi) * policy.kappa * z * policy.R
    lump_sum = policy.phi * policy.kappa * z_bar * policy.R + policy.E_bar
    return {
        "self_funded": self_funded,
        "lump_sum": lump_sum,
        "total": self_funded + lump_sum,
    }


def chile_subsidy(self_funded, policy: PolicyParams):
    """Subsidy that phases out linearly and hits zero at PMAS."""
    if policy.variant is not Variant.CHILE:
        raise PolicyError("chile_subsidy requires the chile variant")
    if not policy.pmas:
        raise PolicyError("PMAS must be positive")
    a = np.asarray(self_funded, dtype=float)
    return np.maximum(0.0, policy.pbs * (1.0 - a / policy.pmas))


def marginal_utility(c, gamma: float):
    return np.power(c, -gamma)


def euler_distance(c1, c2, behav: BehavioralParams, R: float, mode: str = "exact"):
    """Distance to the planner's Euler equation, u'(c1) - theta u'(c2) R delta.

    ``mode="approx"`` is the first-order expansion around c1,
    u'(c1) * [(1 - theta) + theta * gamma * (c2 - c1) / c2].
    """
    c1 = np.asarray(c1, dtype=float)
    c2 = np.asarray(c2, dtype=float)
    if np.any(c1 <= 0) or np.any(c2 <= 0):
        raise ValueError("consumption must be positive")
    g, th = behav.gamma, behav.theta
    u1 = marginal_utility(c1, g)
    if mode == "exact":
        return u1 - th * marginal_utility(c2, g) * R * behav.delta(R)
    if mode == "approx":
        return u1 * ((1.0 - th) + th * g * (c2 - c1) / c2)
    raise ValueError(f"unknown mode {mode!r}")


def consumption_statistics(c1, gamma: float):
    """Per-worker u'(c1) and the certainty-equivalent active consumption.

    ``c_bar`` solves u'(c_bar) = mean u'(c1).
    """
    c1 = np.asarray(c1, dtype=float)
    if c1.size == 0:
        raise ValueError("empty population")
    if np.any(c1 <= 0):
        raise ValueError("consumption must be positive")
    u1 = marginal_utility(c1, gamma)
    c_bar = float(np.mean(u1) ** (-1.0 / gamma))
    return {"u1": u1, "c_bar": c_bar}


def taylor_marginal_utility(c1, c_bar: float, gamma: float):
    # second expansion as printed: u'(c) ~ u'(c_bar) [1 - gamma (c - c_bar) / c_bar]
    c1 = np.asarray(c1, dtype=float)
    return c_bar ** (-gamma) * (1.0 - gamma * (c1 - c_bar) / c_bar)


def earnings_response(policy: PolicyParams, behav: BehavioralParams, z, z_bar: float,
                      reform: Reform | str):
    """dz/dkappa or dz/dphi from the slope/intercept decomposition.

    The partial effects are built from constant elasticities at the
    evaluation point::

        dz/dtau = -z eps_n / (1 - tau - kappa)
        dz/dm   =  z eps_m / m
        dz/db   = -z eps_b / b,     b = phi kappa z_bar R + E_bar

    and combined as dz/dkappa = dz/dtau + dz/dm (1-phi) + dz/db phi z_bar R,
    dz/dphi = -dz/dm kappa + dz/db kappa z_bar R.  The lump sum is moved only
    mechanically here; the welfare engine adds the budget feedback.
    """
    reform = Reform(reform)
    z = np.asarray(z, dtype=float)
    n = policy.net_of_tax
    if n <= 0:
        raise PolicyError("net-of-tax rate must be positive")
    m = policy.link
    b = policy.phi * policy.kappa * z_bar * policy.R + policy.E_bar

    dz_dtau = -z * behav.eps_net_of_tax / n
    if behav.eps_link:
        if m == 0:
            raise PolicyError("benefit-earnings link m is zero but eps_link != 0")
        dz_dm = z * behav.eps_link / m
    else:
        dz_dm = np.zeros_like(z)
    if behav.eps_benefit:
        if b == 0:
            raise PolicyError("lump sum b is zero but eps_benefit != 0")
        dz_db = -z * behav.eps_benefit / b
    else:
        dz_db = np.zeros_like(z)

    if reform is Reform.KAPPA:
        return dz_dtau + dz_dm * (1.0 - policy.phi) + dz_db * policy.phi * z_bar * policy.R
    return -dz_dm * policy.kappa + dz_db * policy.kappa * z_bar * policy.R


def subsidy_thresholds(pmas: float, annuity_price: float, monthly_returns,
                       contribution_caps, contribution_rate: float = 0.1):
    """Pre-subsidy savings bounds for always / never becoming a recipient.

    ``monthly_returns`` and ``contribution_caps`` cover the months from the
    subsidy introduction up to (excluding) the retirement month.  A worker
    whose savings already finance ``pmas`` without further contributions can
    never be a recipient (``a_upper``); one who stays below ``pmas`` even when
    contributing at the cap every month always is (``a_lower``).
    """
    r = np.asarray(monthly_returns, dtype=float)
    caps = np.asarray(contribution_caps, dtype=float)
    if r.size == 0 or r.shape != caps.shape:
        raise ValueError("returns and caps must be non-empty and aligned")
    gross = 1.0 + r
    if np.any(gross <= 0):
        raise ValueError("gross returns must be positive")
    growth = float(np.prod(gross))
    # value at retirement of a contribution made in month t (earns from t+1 on)
    later_growth = np.concatenate([np.cumprod(gross[::-1])[::-1][1:], [1.0]])
    capped = contribution_rate * float(np.sum(caps * later_growth))
    a_upper = pmas * annuity_price / growth
    a_lower = (pmas * annuity_price - capped) / growth
    return {"a_lower": a_lower, "a_upper": a_upper}
