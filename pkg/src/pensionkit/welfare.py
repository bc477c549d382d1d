"""Population moments, welfare gradients of pension reforms and their decomposition.

Two layers live here.

``compute_moments`` / ``gradient`` / ``money_metric`` evaluate the
sufficient-statistics formulas from population aggregates.

``Economy`` is a reduced-form microsimulation of the same model.  It rebuilds
each worker's earnings and consumption under any policy (constant-elasticity
earnings, budget-balancing lump sum, MPC allocation of retirement income) and
evaluates planner welfare.  Its finite differences are the oracle for the
analytic gradient.

Sign convention: ``d = u'(c1) - theta u'(c2)``.  Workers are under-prepared for
retirement when ``d < 0``.  The planner's value of one more dollar of annual
retirement income, scaled by ``R``, is ``V = u'(c1) - mpc * d``, which is
``(1 - mpc) u'(c1) + mpc theta u'(c2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .core import (BehavioralParams, PolicyError, PolicyParams, Reform, Variant,
                   euler_distance, marginal_utility)
from .population import Population


class WelfareError(ValueError):
    pass


@dataclass(frozen=True)
class MomentSet:
    """Population aggregates entering the welfare gradients.

    Means are over workers (population, not sample-corrected).  Suffix
    ``_rec`` denotes ``mean(x * I)`` with ``I`` the subsidy-recipient flag, so
    the non-recipient part is the difference.  ``omega`` are retirement-length
    weights normalized to mean one (all ones when survival is off).
    """

    n: int
    mean_z: float
    mean_u1: float
    mean_d: float
    cov_d_z: float
    cov_u1_z: float
    mean_u1_z: float
    mean_d_z: float
    mean_z_rec: float
    mean_u1_z_rec: float
    mean_d_z_rec: float
    recipient_share: float
    mean_omega: float = 1.0
    mean_omega_z: float = 0.0
    mean_omega_z_rec: float = 0.0
    survival_weighted: bool = False
    euler_mode: str = "exact"

    def value_z(self, mpc: float, recipients_only: bool = False) -> float:
        """mean(V z) with V = u1 - mpc d (optionally times I)."""
        if recipients_only:
            return self.mean_u1_z_rec - mpc * self.mean_d_z_rec
        return self.mean_u1_z - mpc * self.mean_d_z

    def mean_value(self, mpc: float) -> float:
        return self.mean_u1 - mpc * self.mean_d

    @property
    def weighted_z_moments(self) -> dict:
        return {
            "u1_z": self.mean_u1_z, "d_z": self.mean_d_z,
            "u1_z_rec": self.mean_u1_z_rec, "d_z_rec": self.mean_d_z_rec,
            "omega_z": self.mean_omega_z, "omega_z_rec": self.mean_omega_z_rec,
        }


def _normalized_weights(survival, n: int) -> np.ndarray:
    if survival is None:
        return np.ones(n)
    w = np.asarray(survival, dtype=float)
    if w.shape != (n,):
        raise WelfareError("survival weights must have one entry per worker")
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise WelfareError("survival weights must be positive and finite")
    return w / w.mean()


def moments_from_arrays(z, c1, c2, recipient, behav: BehavioralParams, R: float,
                        euler_mode: str = "exact", survival=None) -> MomentSet:
    z = np.asarray(z, dtype=float)
    n = z.shape[0]
    if n == 0:
        raise WelfareError("empty population")
    c1 = np.asarray(c1, dtype=float)
    c2 = np.asarray(c2, dtype=float)
    rec = np.asarray(recipient, dtype=bool).astype(float)
    u1 = marginal_utility(c1, behav.gamma)
    d = euler_distance(c1, c2, behav, R, mode=euler_mode)
    omega = _normalized_weights(survival, n)
    mean_z = float(np.mean(z))
    mean_u1 = float(np.mean(u1))
    mean_d = float(np.mean(d))
    u1z = float(np.mean(u1 * z))
    dz = float(np.mean(d * z))
    return MomentSet(
        n=n,
        mean_z=mean_z,
        mean_u1=mean_u1,
        mean_d=mean_d,
        cov_d_z=float(np.mean((d - mean_d) * (z - mean_z))),
        cov_u1_z=float(np.mean((u1 - mean_u1) * (z - mean_z))),
        mean_u1_z=u1z,
        mean_d_z=dz,
        mean_z_rec=float(np.mean(z * rec)),
        mean_u1_z_rec=float(np.mean(u1 * z * rec)),
        mean_d_z_rec=float(np.mean(d * z * rec)),
        recipient_share=float(np.mean(rec)),
        mean_omega=float(np.mean(omega)),
        mean_omega_z=float(np.mean(omega * z)),
        mean_omega_z_rec=float(np.mean(omega * z * rec)),
        survival_weighted=survival is not None,
        euler_mode=euler_mode,
    )


def compute_moments(pop: Population, behav: BehavioralParams, R: float,
                    variant: Variant | str = Variant.LINEAR, euler_mode: str = "exact",
                    survival=None) -> MomentSet:
    """Moments of a population, summed in worker-id order.

    The Linear variant ignores recipient flags.  ``survival`` is an optional
    per-worker retirement-length weight aligned with ``pop``.
    """
    if len(pop) == 0:
        raise WelfareError("empty population")
    order = np.argsort(pop.id, kind="stable")
    rec = pop.recipient if Variant(variant) is Variant.CHILE else np.zeros(len(pop), bool)
    weights = None if survival is None else np.asarray(survival, dtype=float)[order]
    return moments_from_arrays(pop.z[order], pop.c1[order], pop.c2[order], rec[order],
                               behav, R, euler_mode=euler_mode, survival=weights)


def le_weighted_moments(pop: Population, behav: BehavioralParams, R: float, life_table,
                        variant: Variant | str = Variant.LINEAR) -> MomentSet:
    """Moments with retirement-period terms weighted by expected retirement length.

    ``life_table`` is either a per-worker array of expected retirement years or
    a mapping ``{"below": years, "above": years}`` applied by median z.
    """
    if life_table is None:
        raise WelfareError("missing survival weights")
    if isinstance(life_table, dict):
        try:
            below, above = float(life_table["below"]), float(life_table["above"])
        except KeyError as exc:
            raise WelfareError(f"life table lacks group {exc}") from None
        weights = np.where(below_median_mask(pop.z, pop.id), below, above)
    else:
        weights = np.asarray(life_table, dtype=float)
        if weights.shape != (len(pop),) or np.any(~np.isfinite(weights)):
            raise WelfareError("missing survival weights")
    return compute_moments(pop, behav, R, variant=variant, survival=weights)


def below_median_mask(z, ids) -> np.ndarray:
    """Workers strictly below the lower median, ties in z broken by id."""
    z = np.asarray(z, dtype=float)
    n = z.shape[0]
    order = np.lexsort((np.asarray(ids), z))
    mask = np.zeros(n, dtype=bool)
    mask[order[: n // 2]] = True
    return mask


@dataclass(frozen=True)
class GradientDecomposition:
    reform: Reform
    social_insurance: float
    inter_worker: float
    fiscal_externality: float
    bias_correction: float
    earnings_response: float = 0.0
    lump_sum_response: float = 0.0
    money_metric_total: float | None = None
    mechanical_transfer: float | None = None
    gain_per_dollar: float | None = None

    @property
    def total(self) -> float:
        return (self.social_insurance + self.inter_worker + self.fiscal_externality
                + self.bias_correction)

    def as_dict(self) -> dict:
        return {
            "reform": self.reform.value,
            "social_insurance": self.social_insurance,
            "inter_worker": self.inter_worker,
            "fiscal_externality": self.fiscal_externality,
            "bias_correction": self.bias_correction,
            "total": self.total,
            "money_metric_total": self.money_metric_total,
            "mechanical_transfer": self.mechanical_transfer,
            "gain_per_dollar": self.gain_per_dollar,
        }


def _lump_sum(policy: PolicyParams, mean_z: float) -> float:
    return policy.phi * policy.kappa * policy.R * mean_z + policy.E_bar


def gradient(policy: PolicyParams, behav: BehavioralParams, moments: MomentSet,
             double_mpc_bias: bool = False) -> dict[Reform, GradientDecomposition]:
    """dW/dkappa and dW/dphi split into four components.

    Earnings respond proportionally, ``dz_i = g z_i``, where ``g`` combines the
    direct elasticity effects with the feedback through the budget-balancing
    lump sum.  ``double_mpc_bias`` applies the MPC twice in the bias term (a
    sensitivity reading; the Economy oracle matches the default).
    """
    k, phi, tau, R = policy.kappa, policy.phi, policy.tau, policy.R
    mu, beta = behav.mpc, behav.beta
    e_n, e_m, e_b = behav.eps_net_of_tax, behav.eps_link, behav.eps_benefit
    ptax = policy.implicit_tax
    zbar = moments.mean_z
    if not zbar > 0:
        raise WelfareError("mean earnings must be positive")
    wbar = moments.mean_omega
    n = policy.net_of_tax
    if n <= 0:
        raise PolicyError("net-of-tax rate must be positive")
    if e_m and policy.link == 0:
        raise PolicyError("benefit-earnings link is zero but eps_link != 0")

    vbar = moments.mean_value(mu)
    vz = moments.value_z(mu)
    vtz = vz - ptax * moments.value_z(mu, recipients_only=True)
    w1 = moments.mean_omega_z - ptax * moments.mean_omega_z_rec
    q_z = (tau + k) * zbar - (1.0 - phi) * k * w1
    # mean((1 - t) theta u2 z), using theta u2 = u1 - d
    t2 = (moments.mean_u1_z - moments.mean_d_z) - ptax * (
        moments.mean_u1_z_rec - moments.mean_d_z_rec)
    b = _lump_sum(policy, zbar)
    if e_b and b <= 0:
        raise PolicyError("lump sum b must be positive when eps_benefit != 0")
    mpc_power = 2 if double_mpc_bias else 1

    direct = {
        Reform.KAPPA: -e_n / n + (e_m / k if e_m else 0.0),
        Reform.PHI: -e_m / (1.0 - phi) if e_m else 0.0,
    }
    mech_db = {
        Reform.KAPPA: R * (zbar - (1.0 - phi) * w1) / wbar,
        Reform.PHI: R * k * w1 / wbar,
    }
    feedback = 1.0 + (R * e_b * q_z / (wbar * b) if e_b else 0.0)

    out = {}
    for reform in (Reform.KAPPA, Reform.PHI):
        db = (mech_db[reform] + R * direct[reform] * q_z / wbar) / feedback
        g = direct[reform] - (e_b * db / b if e_b else 0.0)
        if reform is Reform.KAPPA:
            social = vz - moments.mean_u1_z
            inter = (1.0 - phi) * vtz + vbar * (zbar - (1.0 - phi) * w1) / wbar - vz
        else:
            social = 0.0
            inter = -k * (vtz - vbar * w1 / wbar)
        fiscal = vbar * g * q_z / wbar
        bias = mu ** mpc_power * (1.0 - beta) * (1.0 - phi) * k * g * t2
        out[reform] = GradientDecomposition(
            reform=reform, social_insurance=social, inter_worker=inter,
            fiscal_externality=fiscal, bias_correction=bias,
            earnings_response=g, lump_sum_response=db,
        )
    return out


def mechanical_transfer(reform: Reform | str, z, policy: PolicyParams) -> float:
    """Resources moved by a unit reform before any behavioral response."""
    z = np.asarray(z, dtype=float)
    if Reform(reform) is Reform.KAPPA:
        return float(np.mean(z))
    return float(policy.kappa * policy.R * 0.5 * np.mean(np.abs(z - z.mean())))


def money_metric(grad: GradientDecomposition, moments: MomentSet, policy: PolicyParams,
                 mech: float, numeraire: str = "active", mpc: float | None = None
                 ) -> GradientDecomposition:
    """Attach money-metric gain and gain per mechanically transferred dollar.

    ``numeraire="active"`` divides by mean u'(c1).  ``"retirement"`` divides
    by the mean value of a retirement dollar and needs ``mpc``.
    """
    if numeraire == "active":
        scale = moments.mean_u1
    elif numeraire == "retirement":
        if mpc is None:
            raise WelfareError("retirement numeraire needs the MPC")
        scale = moments.mean_value(mpc)
    else:
        raise WelfareError(f"unknown numeraire {numeraire!r}")
    if not scale > 0:
        raise WelfareError("numeraire marginal utility must be positive")
    if not mech > 0:
        raise WelfareError(f"zero mechanical transfer for {grad.reform.value} reform")
    total = grad.total / scale
    return replace(grad, money_metric_total=total, mechanical_transfer=mech,
                   gain_per_dollar=total / mech)


def crra_utility(c, gamma: float):
    c = np.asarray(c, dtype=float)
    if gamma == 1.0:
        return np.log(c)
    return c ** (1.0 - gamma) / (1.0 - gamma)


@dataclass
class Allocation:
    z: np.ndarray
    b: float
    y1: np.ndarray
    y2: np.ndarray
    c1: np.ndarray
    c2: np.ndarray


@dataclass
class Economy:
    """Reduced-form microsimulation anchored at an observed reference policy.

    The population's ``z, c1, c2`` are what workers earn and consume under
    ``reference``.  For another policy earnings scale by constant elasticities
    of the net-of-tax rate, the benefit-earnings link and the lump sum.  Income
    changes are consumed with an MPC out of retirement income.  The lump sum
    balances a per-cohort budget in which ``survival`` weights scale the
    cost of every retirement dollar.
    """

    pop: Population
    reference: PolicyParams
    behav: BehavioralParams
    survival: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.pop) == 0:
            raise WelfareError("empty population")
        order = np.argsort(self.pop.id, kind="stable")
        self.pop = self.pop.take(order)
        if self.survival is not None:
            self.survival = np.asarray(self.survival, dtype=float)
            if self.survival.shape != (len(self.pop),):
                raise WelfareError("survival weights must have one entry per worker")
            self.survival = self.survival[order]
        self.omega = _normalized_weights(self.survival, len(self.pop))
        if self.reference.variant is Variant.CHILE:
            self.rec = self.pop.recipient.astype(float)
        else:
            self.rec = np.zeros(len(self.pop))
        ref = self.reference
        z0 = self.pop.z
        self.z0, self.c10, self.c20 = z0, self.pop.c1, self.pop.c2
        self.b0 = _lump_sum(ref, float(z0.mean()))
        self.budget_const = self.b0 - self._budget_variable(ref, z0)
        self.y10, self.y20 = self._incomes(ref, z0, self.b0)
        u1 = marginal_utility(self.c10, self.behav.gamma)
        u2 = marginal_utility(self.c20, self.behav.gamma)
        t = self._tax(ref)
        mpc, th = self.behav.mpc, self.behav.theta
        perceived = (ref.net_of_tax * u1 + (1.0 - t) * (1.0 - ref.phi) * ref.kappa
                     * ((1.0 - mpc) * u1 + mpc * self.behav.beta * th * u2))
        self.labor_curv = 1.0 / self.behav.eps_net_of_tax if self.behav.eps_net_of_tax else 1.0
        with np.errstate(divide="ignore", invalid="ignore"):
            self.psi = np.where(z0 > 0, perceived / np.power(z0, self.labor_curv), 0.0)

    def _tax(self, policy: PolicyParams) -> np.ndarray:
        return policy.implicit_tax * self.rec

    def _pbs(self, policy: PolicyParams) -> float:
        return policy.pbs if policy.variant is Variant.CHILE else 0.0

    def _budget_variable(self, policy: PolicyParams, z: np.ndarray) -> float:
        t = self._tax(policy)
        w = self.omega
        revenue = policy.R * (policy.tau + policy.kappa) * float(z.mean())
        payout = ((1.0 - policy.phi) * policy.kappa * policy.R * float(np.mean(w * (1.0 - t) * z))
                  + self._pbs(policy) * float(np.mean(w * self.rec)))
        return (revenue - payout) / float(w.mean())

    def _incomes(self, policy: PolicyParams, z: np.ndarray, b: float):
        t = self._tax(policy)
        y1 = policy.net_of_tax * z
        y2 = (1.0 - t) * (1.0 - policy.phi) * policy.kappa * policy.R * z + self._pbs(policy) * self.rec + b
        return y1, y2

    def _check(self, policy: PolicyParams):
        if policy.variant is not self.reference.variant:
            raise WelfareError("policy variant differs from the reference variant")
        if policy.R != self.reference.R:
            raise WelfareError("changing R is not a modeled reform")

    def earnings(self, policy: PolicyParams) -> tuple[np.ndarray, float]:
        """Earnings and lump sum under ``policy`` (lump sum solved as a fixed point)."""
        self._check(policy)
        ref, bh = self.reference, self.behav
        scale = np.ones_like(self.z0)
        if bh.eps_net_of_tax:
            n, n0 = policy.net_of_tax, ref.net_of_tax
            if n <= 0:
                raise PolicyError("net-of-tax rate must be positive")
            scale = scale * (n / n0) ** bh.eps_net_of_tax
        if bh.eps_link:
            m = policy.link * (1.0 - self._tax(policy))
            m0 = ref.link * (1.0 - self._tax(ref))
            if np.any(m <= 0) or np.any(m0 <= 0):
                raise PolicyError("benefit-earnings link is zero but eps_link != 0")
            scale = scale * (m / m0) ** bh.eps_link
        z_tilde = self.z0 * scale
        # only the earnings-proportional part of the budget scales with x
        fixed = -self._pbs(policy) * float(np.mean(self.omega * self.rec)) / float(self.omega.mean())
        a = self._budget_variable(policy, z_tilde) - fixed
        c = self.budget_const + fixed
        e_b = bh.eps_benefit
        if not e_b:
            return z_tilde, a + c
        b0 = self.b0
        if b0 <= 0:
            raise PolicyError("reference lump sum must be positive when eps_benefit != 0")

        def excess(x):
            return b0 * x - a * x ** (-e_b) - c

        lo, hi = 0.5, 2.0
        for _ in range(200):
            if excess(lo) < 0 < excess(hi):
                break
            if excess(lo) >= 0:
                lo *= 0.5
            if excess(hi) <= 0:
                hi *= 2.0
        else:
            raise WelfareError("lump-sum fixed point not bracketed")
        x = brentq(excess, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
        # one Newton polish step
        x = x - excess(x) / (b0 + e_b * a * x ** (-e_b - 1.0))
        return z_tilde * x ** (-e_b), b0 * x

    def allocation(self, policy: PolicyParams) -> Allocation:
        z, b = self.earnings(policy)
        y1, y2 = self._incomes(policy, z, b)
        mpc, R = self.behav.mpc, policy.R
        dy2 = y2 - self.y20
        c1 = self.c10 + (y1 - self.y10) + (1.0 - mpc) * dy2 / R
        c2 = self.c20 + mpc * dy2
        bad = np.flatnonzero((c1 <= 0) | (c2 <= 0))
        if bad.size:
            raise WelfareError(f"consumption non-positive for worker id {int(self.pop.id[bad[0]])}")
        return Allocation(z=z, b=b, y1=y1, y2=y2, c1=c1, c2=c2)

    def welfare(self, policy: PolicyParams) -> float:
        """Mean planner utility u(c1) + delta theta u(c2) - v(z)."""
        al = self.allocation(policy)
        g = self.behav.gamma
        p = self.labor_curv
        disutility = self.psi * np.power(al.z, 1.0 + p) / (1.0 + p)
        per_worker = (crra_utility(al.c1, g)
                      + self.behav.theta / policy.R * crra_utility(al.c2, g) - disutility)
        return float(np.mean(per_worker))

    def recenter(self, policy: PolicyParams) -> tuple["Economy", PolicyParams]:
        """Economy whose reference is ``policy``, with the matching policy record.

        The returned policy carries ``E_bar`` such that
        ``phi kappa R mean(z) + E_bar`` is the budget-balancing lump sum.
        """
        al = self.allocation(policy)
        e_bar = al.b - policy.phi * policy.kappa * policy.R * float(al.z.mean())
        centered = replace(policy, E_bar=e_bar)
        pop = self.pop.replace_columns(z=al.z, c1=al.c1, c2=al.c2)
        econ = Economy(pop, centered, self.behav, survival=self.survival)
        return econ, centered

    def moments(self, euler_mode: str = "exact") -> MomentSet:
        return moments_from_arrays(self.z0, self.c10, self.c20, self.rec, self.behav,
                                   self.reference.R, euler_mode=euler_mode,
                                   survival=self.survival)

    def gradient(self, **kwargs) -> dict[Reform, GradientDecomposition]:
        return gradient(self.reference, self.behav, self.moments(), **kwargs)


def evaluate_welfare(policy: PolicyParams, pop: Population, behav: BehavioralParams,
                     reference: PolicyParams | None = None, survival=None) -> float:
    """Mean planner welfare of ``pop`` under ``policy``.

    ``pop`` is observed under ``reference`` (default: ``policy`` itself).
    """
    econ = Economy(pop, reference or policy, behav, survival=survival)
    return econ.welfare(policy)


def finite_difference_gradient(econ: Economy, policy: PolicyParams, h: float = 1e-5
                               ) -> dict[Reform, float]:
    """Central differences of ``econ.welfare`` in kappa and phi."""
    out = {}
    for reform, attr in ((Reform.KAPPA, "kappa"), (Reform.PHI, "phi")):
        x = getattr(policy, attr)
        up = econ.welfare(replace(policy, **{attr: x + h}))
        down = econ.welfare(replace(policy, **{attr: x - h}))
        out[reform] = (up - down) / (2.0 * h)
    return out
