from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pensionkit.core import BehavioralParams, PolicyParams, Variant
from pensionkit.optimizer import (Box, DesignModel, SolverError, comparative_statics,
                                  construct_fixed_point, foc_jacobian, hessian_diagnostics,
                                  linear_template, mahalanobis_hull, optimum_pipeline,
                                  pairs_bootstrap, progressivity_share, quasi_random_starts,
                                  resample_ids, solve_optimum)
from pensionkit.population import Population

from conftest import random_population

PLANT = PolicyParams(kappa=0.12, phi=0.5)
BEHAV = BehavioralParams()


def type_population(K: int = 40, seed: int = 0) -> Population:
    r = np.random.default_rng(seed)
    z = np.exp(r.normal(0, 0.5, K))
    c1 = 0.8 * z ** 0.85 * np.exp(r.normal(0, 0.05, K))
    c2 = c1 * np.exp(-(0.3 - 0.08 * np.log(z)))
    return Population.from_arrays(z, c1, c2, np.zeros(K, bool))


@pytest.fixture(scope="module")
def planted_types():
    return construct_fixed_point(type_population(), PLANT, BEHAV)


@pytest.fixture(scope="module")
def linear_model():
    pop = random_population(np.random.default_rng(0), 3000)
    return DesignModel.from_population(pop, PolicyParams(kappa=0.1, phi=0.3, E_bar=0.01), BEHAV)


def test_fixed_point_recovers_planted_optimum(planted_types):
    model = DesignModel.from_population(planted_types, PLANT, BEHAV)
    np.testing.assert_allclose(model.foc([PLANT.kappa, PLANT.phi]), 0.0, atol=1e-8)
    res = solve_optimum(model, start=(0.2, 0.3))
    assert max(abs(res.kappa_star - 0.12), abs(res.phi_star - 0.5)) <= 1e-8
    assert res.concave


@pytest.mark.parametrize("plant", [(0.1, 0.7), (0.15, 0.3)])
def test_fixed_point_other_plants(plant):
    p = PolicyParams(kappa=plant[0], phi=plant[1])
    pop = construct_fixed_point(type_population(), p, BEHAV)
    res = solve_optimum(DesignModel.from_population(pop, p, BEHAV), n_starts=3)
    assert res.kappa_star == pytest.approx(plant[0], abs=1e-8)
    assert res.phi_star == pytest.approx(plant[1], abs=1e-8)


def test_optimum_contract(linear_model):
    res = solve_optimum(linear_model, n_starts=5)
    assert max(abs(v) for v in res.foc_residuals) <= 1e-8
    assert res.hessian_det > 0 and res.concave
    assert 0 < res.progressivity_share < 1
    again = [solve_optimum(linear_model, start=s) for s in [(0.05, 0.2), (0.3, 0.9), (0.2, 0.5)]]
    for other in again:
        assert abs(other.kappa_star - res.kappa_star) <= 1e-6
        assert abs(other.phi_star - res.phi_star) <= 1e-6
    assert set(res.as_dict()) >= {"kappa_star", "phi_star", "foc_residuals", "hessian_det"}


def test_hessian_diagnostics_on_known_quadratic():
    def w(k, p):
        return -2 * (k - 0.2) ** 2 - 3 * (p - 0.5) ** 2 + 0.5 * (k - 0.2) * (p - 0.5)
    hd = hessian_diagnostics(None, (0.2, 0.5), h=1e-3, welfare=w)
    assert hd["d2_kappa"] == pytest.approx(-4, rel=1e-6)
    assert hd["d2_phi"] == pytest.approx(-6, rel=1e-6)
    assert hd["cross"] == pytest.approx(0.5, rel=1e-6)
    assert hd["det"] == pytest.approx(24 - 0.25, rel=1e-6) and hd["concave"]
    convex = hessian_diagnostics(None, (0.2, 0.5), h=1e-3, welfare=lambda k, p: k ** 2 + p ** 2)
    assert not convex["concave"]
    with pytest.raises(SolverError):
        hessian_diagnostics(None, (1e-5, 0.5), h=1e-3, welfare=w)


def test_no_root_in_box_raises(linear_model):
    with pytest.raises(SolverError):
        solve_optimum(linear_model, box=Box(kappa=(0.01, 0.03), phi=(0.01, 0.05)), n_starts=2)


def test_quasi_random_starts_inside_box():
    box = Box()
    pts = quasi_random_starts(box, 8)
    assert pts.shape == (8, 2)
    assert all(box.contains(p) for p in pts)
    np.testing.assert_array_equal(pts, quasi_random_starts(box, 8))


def test_lump_sum_system_progressivity_is_half():
    pop = random_population(np.random.default_rng(1), 1000)
    assert progressivity_share(PolicyParams(kappa=0.1, phi=1.0, E_bar=0.01), pop) == 0.5
    assert progressivity_share(PolicyParams(kappa=0.0, phi=0.0, E_bar=0.01), pop) == 0.5


@given(a=st.floats(0.0, 1.0), b=st.floats(0.0, 1.0))
def test_progressivity_monotone_in_phi(a, b):
    pop = random_population(np.random.default_rng(2), 400)
    lo, hi = sorted((a, b))
    p_lo = progressivity_share(PolicyParams(kappa=0.1, phi=lo), pop)
    p_hi = progressivity_share(PolicyParams(kappa=0.1, phi=hi), pop)
    assert p_lo <= p_hi + 1e-15


def test_progressivity_counts_subsidies():
    pop = random_population(np.random.default_rng(3), 1000, recipients=True)
    chile = PolicyParams(kappa=0.1, phi=0.0, variant=Variant.CHILE, pbs=0.03, pmas=0.09)
    assert progressivity_share(chile, pop) > progressivity_share(linear_template(chile), pop)
    with pytest.raises(ValueError):
        progressivity_share(chile, pop.take([]))


def test_linear_template():
    chile = PolicyParams(kappa=0.1, phi=0.0, E_bar=0.01, variant=Variant.CHILE, pbs=0.03, pmas=0.09)
    lin = linear_template(chile)
    assert lin.variant is Variant.LINEAR and lin.pbs is None and lin.phi == 0.0
    assert lin.kappa == 0.1 and lin.E_bar == 0.01
    assert linear_template(lin) is lin


def test_resample_ids_are_deterministic():
    a = resample_ids(100, 5, 3)
    assert np.array_equal(a, resample_ids(100, 5, 3))
    assert not np.array_equal(a, resample_ids(100, 5, 4))
    assert a.min() >= 0 and a.max() < 100


def test_bootstrap_independent_of_thread_count(planted_types):
    pop = planted_types.take(np.random.default_rng(0).integers(0, 40, 600))
    pop = pop.replace_columns(id=np.arange(600))
    model = DesignModel.from_population(pop, PLANT, BEHAV)
    x = solve_optimum(model, start=(0.12, 0.5))
    point = (x.kappa_star, x.phi_star)
    pipe = optimum_pipeline(PLANT, BEHAV, point, jacobian=foc_jacobian(model, point))
    one = pairs_bootstrap(pop, pipe, 12, seed=9)
    three = pairs_bootstrap(pop, pipe, 12, seed=9, n_jobs=3)
    shuffled = pairs_bootstrap(pop.take(np.random.default_rng(1).permutation(600)), pipe, 12, seed=9)
    assert one.replicates == three.replicates == shuffled.replicates
    assert one.percentile == three.percentile
    lo, hi = one.percentile["kappa"]
    assert lo <= x.kappa_star <= hi


def test_bootstrap_failure_budget():
    pop = random_population(np.random.default_rng(4), 50)

    def flaky(sample):
        raise SolverError("no root")

    with pytest.raises(SolverError):
        pairs_bootstrap(pop, flaky, 10, seed=1)
    with pytest.raises(ValueError):
        pairs_bootstrap(pop, flaky, 1, seed=1)


def test_mahalanobis_hull_keeps_central_points():
    pts = np.random.default_rng(0).normal(size=(400, 2))
    hull = mahalanobis_hull(pts, 0.95)
    assert 3 <= len(hull) < 400
    assert np.all(np.abs(hull) < 4)


def test_comparative_statics_rows(linear_model):
    rows = comparative_statics(linear_model, "theta", [0.7, 1.0])
    assert len(rows) == 2 and rows[1]["rational_drop"] == 0.0
    with pytest.raises(ValueError):
        comparative_statics(linear_model, "delta", [1.0])


def test_beta_one_zeroes_bias_in_sweep(linear_model):
    rows = comparative_statics(linear_model, "beta", [1.0])
    assert rows[0]["bias_kappa"] == 0.0 and rows[0]["bias_phi"] == 0.0
