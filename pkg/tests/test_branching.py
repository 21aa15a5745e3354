import math

import numpy as np
import pytest
import scipy.linalg as sla

from tumorbranch import build_gompertz_bd, build_sparse_rates
from tumorbranch.branching import (
    BranchingModel,
    bisect_critical_kappa,
    critical_scale,
    extinction_fixed_point,
    gamma1,
    gamma1_laplace,
    kappa0,
    kappa0_green,
    mean_rates,
    moy_condition,
    skeleton_mean,
)
from tumorbranch.errors import (
    DimensionMismatch,
    InvalidParameter,
    NoConvergence,
)
from tumorbranch.spectral import perron_triple

from conftest import gompertz_model, single_model


def offspring_mean_oracle(model):
    """Independent enumeration of the offspring law per type."""
    k = model.k
    a = model.jump_rates
    q = model.rates.offdiag.toarray()
    m = np.zeros((k, k))
    for x in range(k):
        # branching event: one child at type 1 and one child at type x
        m[x, 0] += model.beta[x] / a[x]
        m[x, x] += model.beta[x] / a[x]
        # single-child moves
        for y in range(k):
            if y != x:
                m[x, y] += q[x, y] / a[x]
        # absorption contributes no children
    return m


def test_skeleton_single_state_offspring_enumeration():
    model = single_model(1.0, 2.0)
    m = skeleton_mean(model).toarray()
    assert m == pytest.approx(offspring_mean_oracle(model), abs=0.0)
    # a = 3; a branching event puts two children at type 1
    assert m[0, 0] == pytest.approx(2.0 / 3.0)
    # mean offspring count: 2 * (beta/a) + 0 * (q0/a)
    assert m.sum() == pytest.approx(2.0 * (1.0 / 3.0))


def test_skeleton_no_creation_rows_equal_jump_chain(m3):
    beta = np.array([0.0, 1.0, 0.0])
    model = BranchingModel(m3, beta)
    m = skeleton_mean(model).toarray()
    dense = m3.offdiag.toarray()
    for x in (0, 2):
        assert m[x] == pytest.approx(dense[x] / m3.exit_rates[x], abs=0.0)


def test_skeleton_m3_matches_enumeration(m3_model):
    m = skeleton_mean(m3_model).toarray()
    assert m == pytest.approx(offspring_mean_oracle(m3_model), abs=1e-15)


def test_skeleton_row_sums_match_offspring_counts(m3_model):
    m = skeleton_mean(m3_model).toarray()
    a = m3_model.jump_rates
    q = m3_model.rates.exit_rates
    q0 = m3_model.rates.absorption
    beta = m3_model.beta
    expected = (2 * beta + q - q0) / a
    assert m.sum(axis=1) == pytest.approx(expected)


def test_mean_rates_single_state_scalar():
    model = single_model(1.0, 2.0)
    mm = mean_rates(model)
    assert mm.mean_rates.toarray().ravel() == pytest.approx([1.0 - 2.0])


def test_mean_rates_no_creation_equals_generator(m3):
    model = BranchingModel(m3, np.zeros(3) + 0.0)
    # a zero beta keeps a(x) = q(x) > 0, and A must equal Q exactly
    mm = mean_rates(model)
    assert abs(mm.mean_rates - m3.matrix).max() == 0.0


def test_mean_rates_gompertz_entrywise_scan():
    model = gompertz_model(1.0, 20, 50, kappa=0.02)
    mm = mean_rates(model)
    a_dense = mm.mean_rates.toarray()
    q_dense = model.rates.to_dense()
    # oracle: independent entrywise scan of the definition
    for x in range(50):
        for y in range(50):
            expected = q_dense[x, y] + (model.beta[x] if y == 0 else 0.0)
            assert a_dense[x, y] == pytest.approx(expected, abs=0.0)


def test_mean_rates_shift_is_submarkovian():
    model = gompertz_model(1.0, 20, 40, kappa=0.05)
    mm = mean_rates(model)
    shifted = mm.shifted
    rows = np.asarray(shifted.matrix.sum(axis=1)).ravel()
    assert np.all(rows <= 1e-12)
    assert shifted.absorption == pytest.approx(
        model.rates.absorption + mm.beta_bar - model.beta
    )


def test_model_validation():
    rates = build_sparse_rates([(1, 0, 1.0)], 1)
    with pytest.raises(DimensionMismatch):
        BranchingModel(rates, np.array([1.0, 2.0]))
    with pytest.raises(InvalidParameter):
        BranchingModel(rates, np.array([-1.0]))


# --- gamma1 and kappa0 --------------------------------------------------------


def test_gamma1_single_state_closed_form():
    model = single_model(3.0, 2.0)
    for t in (0.3, 1.0, 2.5):
        assert gamma1(model, t) == pytest.approx(3.0 * math.exp(-2.0 * t), abs=1e-12)


def test_gamma1_time_zero(m3_model):
    assert gamma1(m3_model, 0.0) == pytest.approx(m3_model.beta[0])


def test_gamma1_matches_dense_expm(m3_model):
    oracle = float(
        m3_model.beta @ sla.expm(0.5 * m3_model.rates.to_dense())[0]
    )
    assert gamma1(m3_model, 0.5) == pytest.approx(oracle, abs=1e-9)


@pytest.mark.parametrize("b,d", [(1.0, 2.0), (2.0, 1.0)])
def test_kappa0_single_state_both_routes(b, d):
    res = kappa0(single_model(b, d), quad_tol=1e-11)
    assert res.green == pytest.approx(b / d, abs=1e-10)
    assert res.quadrature == pytest.approx(b / d, abs=1e-10)


def test_kappa0_verdicts():
    assert kappa0(single_model(1.0, 2.0)).verdict() == "subcritical"
    assert kappa0(single_model(2.0, 1.0)).verdict() == "supercritical"
    assert kappa0(single_model(1.0, 1.0)).verdict() == "critical"


def test_kappa0_green_linear_in_kappa_and_truncation_stable():
    base = kappa0_green(gompertz_model(1.0, 20, 60, kappa=1.0))
    for kappa in (0.5, 2.0, 7.0):
        val = kappa0_green(gompertz_model(1.0, 20, 60, kappa=kappa))
        assert val == pytest.approx(kappa * base, rel=1e-12)
    # truncation stability at the doubled size
    base2 = kappa0_green(gompertz_model(1.0, 20, 120, kappa=1.0))
    assert base == pytest.approx(base2, rel=5e-3)


def test_critical_kappa_bisection_matches_linearity():
    make = lambda kappa: gompertz_model(1.0, 20, 60, kappa=kappa)
    star = bisect_critical_kappa(make, tol=1e-12)
    # linearity oracle: kappa0(kappa) = kappa * kappa0(1)
    assert star == pytest.approx(1.0 / kappa0_green(make(1.0)), rel=1e-9)
    assert kappa0_green(make(star)) == pytest.approx(1.0, abs=1e-9)
    assert critical_scale(make(1.0)) == pytest.approx(star, rel=1e-9)


def test_gamma1_laplace_single_state():
    model = single_model(3.0, 2.0)
    for lam in (0.5, 1.0):
        assert gamma1_laplace(model, lam, quad_tol=1e-10) == pytest.approx(
            3.0 / (lam + 2.0), abs=1e-9
        )


def test_laplace_eigen_relation_m3(m3_model):
    # the growth rate of the mean matrix is the root of the Laplace transform
    lam = perron_triple(mean_rates(m3_model).mean_rates).lambda_star
    assert lam > 0
    assert gamma1_laplace(m3_model, lam, quad_tol=1e-9) == pytest.approx(
        1.0, abs=1e-6
    )


# --- extinction ----------------------------------------------------------------


def test_extinction_single_state_quadratic_root():
    q = extinction_fixed_point(single_model(2.0, 1.0), tol=1e-13)
    assert q[0] == pytest.approx(0.5, abs=1e-10)


def test_extinction_pure_absorption(m3):
    model = BranchingModel(m3, np.zeros(3))
    assert extinction_fixed_point(model) == pytest.approx([1.0, 1.0, 1.0])


def test_extinction_subcritical_is_one_supercritical_below_one():
    star = critical_scale(gompertz_model(1.0, 20, 60, kappa=1.0))
    sub = extinction_fixed_point(gompertz_model(1.0, 20, 60, kappa=0.5 * star))
    assert sub == pytest.approx(np.ones(60), abs=1e-9)
    sup = extinction_fixed_point(gompertz_model(1.0, 20, 60, kappa=2.0 * star))
    assert np.all(sup < 1.0)


def test_extinction_iterates_monotone(m3_model):
    # the generating map iterates increase componentwise from zero
    a = m3_model.jump_rates
    off = m3_model.rates.offdiag
    absorption = m3_model.rates.absorption
    s = np.zeros(3)
    for _ in range(200):
        nxt = (m3_model.beta * (s[0] * s) + off @ s + absorption) / a
        assert np.all(nxt >= s - 1e-15)
        assert np.all(nxt <= 1.0)
        s = nxt


def test_extinction_near_critical_raises():
    with pytest.raises(NoConvergence):
        extinction_fixed_point(single_model(1.0, 1.0), tol=1e-12, max_iter=2000)


# --- second moment ---------------------------------------------------------------


def test_moy_single_state_direct_formula():
    val = moy_condition(single_model(2.0, 1.0), np.array([1.0]), np.array([1.0]))
    assert val == pytest.approx(8.0 / 3.0)


def test_moy_no_creation_collapses(m3):
    model = BranchingModel(m3, np.zeros(3))
    nu = np.array([0.2, 0.5, 0.3])
    mu = np.array([1.0, 2.0, 3.0])
    q = m3.offdiag.toarray()
    expected = sum(
        nu[y] * sum(q[y, z] * mu[z] ** 2 for z in range(3)) / m3.exit_rates[y]
        for y in range(3)
    )
    assert moy_condition(model, nu, mu) == pytest.approx(expected)


def test_moy_truncation_stability():
    star = critical_scale(gompertz_model(1.0, 20, 60, kappa=1.0))
    vals = {}
    for k in (60, 120):
        model = gompertz_model(1.0, 20, k, kappa=2 * star, x_cap=20)
        triple = perron_triple(mean_rates(model).skeleton)
        vals[k] = moy_condition(model, triple.nu, triple.mu)
    assert vals[60] == pytest.approx(vals[120], rel=1e-2)


def test_moy_dimension_check(m3_model):
    with pytest.raises(DimensionMismatch):
        moy_condition(m3_model, np.ones(2), np.ones(3))
