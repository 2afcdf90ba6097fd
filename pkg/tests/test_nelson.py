import numpy as np
import pytest

from slab.exceptions import DomainError, EstimationError
from slab.fields import ScalarField, ScalarJet, VectorField, gaussian_density
from slab.nelson import (DriftEstimate, NelsonParams, chain_rule_check, closed_form_backward_drift,
                         d_mu_combine, estimate_density, estimate_drift, product_rule_check,
                         reversal_identity_check)
from slab.paths import DiffusionSpec, InitialLaw, simulate

OU = VectorField.affine([[-1.0]], name="ou")
ZERO = VectorField.constant([0.0])
GRID = np.linspace(-0.8, 0.8, 5)[:, None]


@pytest.fixture(scope="module")
def ou_ens():
    # stationary OU: both drifts are known, forward -x and backward +x
    spec = DiffusionSpec(OU, 1.0, InitialLaw.gaussian([0.0], [0.5]))
    return simulate(spec, 100_000, 1e-3, seed=11, record_every=10)


@pytest.fixture(scope="module")
def bm_ens():
    spec = DiffusionSpec(ZERO, 1.0, InitialLaw.gaussian([0.0], [1.0]))
    return simulate(spec, 100_000, 1e-3, seed=12, record_every=10)


def _params(**kw):
    base = dict(h=0.02, bandwidth=0.1, t_buffer=0.1, pool=0.2)
    base.update(kw)
    return NelsonParams(**base)


def _square():
    def func(t, x):
        return x[..., 0] ** 2

    def jet(t, x):
        return ScalarJet(np.zeros(x.shape[:-1]), 2 * x, np.full(x.shape[:-1], 2.0))

    return ScalarField(func, 1, jet=jet, name="x^2")


def test_ou_forward_drift(ou_ens):
    est = estimate_drift(ou_ens, 0.5, GRID, _params(), "forward")
    err = est.values - (-GRID)
    # smoothing bias of a linear target is zero, so only noise should remain
    assert np.all(np.abs(err) <= 3 * est.stderr + 0.02)


def test_ou_backward_drift(ou_ens):
    est = estimate_drift(ou_ens, 0.5, GRID, _params(), "backward")
    # the regression of +x smoothed by the kernel picks up a small bias bw^2 x / var
    assert np.all(np.abs(est.values - GRID) <= np.maximum(3 * est.stderr, 0.05))


def test_brownian_forward_drift_is_zero(bm_ens):
    est = estimate_drift(bm_ens, 0.5, GRID, _params(), "forward")
    assert np.all(np.abs(est.values) <= 3 * est.stderr + 1e-3)


def test_estimate_outside_window_rejected(ou_ens):
    with pytest.raises(DomainError):
        estimate_drift(ou_ens, 0.05, GRID, _params(pool=0.0), "forward")


def test_params_validation():
    with pytest.raises(ValueError):
        NelsonParams(h=0.0)
    with pytest.raises(ValueError):
        NelsonParams(h=0.1, t_buffer=0.05)


def test_closed_form_backward_drift_cases():
    x = np.linspace(-1, 1, 7)[:, None]
    t = np.full(len(x), 0.5)
    assert closed_form_backward_drift(OU, 0.0, gaussian_density([0.0], 0.5)) is OU
    ou_star = closed_form_backward_drift(OU, 1.0, gaussian_density([0.0], 0.5))
    np.testing.assert_allclose(ou_star(t, x), x, atol=1e-12)
    # Brownian motion from the origin: rho_t = N(0, t) and b_* = x / t
    bm_star = closed_form_backward_drift(ZERO, 1.0, gaussian_density([0.0], 1e-12, var_rate=1.0))
    np.testing.assert_allclose(bm_star(t, x), x / 0.5, rtol=1e-9)


def test_closed_form_backward_drift_needs_positive_density():
    def jet(t, x):
        return ScalarJet(np.zeros(x.shape[:-1]), np.zeros(x.shape), np.zeros(x.shape[:-1]))

    rho = ScalarField(lambda t, x: np.zeros(x.shape[:-1]), 1, jet=jet)
    bstar = closed_form_backward_drift(OU, 1.0, rho)
    with pytest.raises(DomainError):
        bstar(0.5, np.array([[0.0]]))


def test_density_of_brownian_motion():
    spec = DiffusionSpec(ZERO, 1.0, InitialLaw.point([0.0]))
    ens = simulate(spec, 100_000, 1e-2, seed=4)
    rho = estimate_density(ens, 1.0)
    assert abs(rho(np.array([[0.0]]))[0] - 1 / np.sqrt(2 * np.pi)) <= 0.05 / np.sqrt(2 * np.pi)
    assert abs(rho.total_mass() - 1.0) < 1e-3
    with pytest.raises(EstimationError):
        estimate_density(ens, 0.0)


def test_density_variance_of_ou(ou_ens):
    rho = estimate_density(ou_ens, 0.5)
    x = np.linspace(-5, 5, 2001)[:, None]
    dens = rho(x)
    dx = x[1, 0] - x[0, 0]
    var = np.sum(x[:, 0] ** 2 * dens) * dx / (np.sum(dens) * dx)
    # the kernel adds bw^2 to the sample variance
    assert abs(var - 0.5 - rho.bandwidth**2) <= 0.025


def test_d_mu_combine_arrays_and_fields():
    f, b = np.array([1.0, 2.0]), np.array([3.0, -2.0])
    np.testing.assert_array_equal(d_mu_combine(f, b, 1), f)
    np.testing.assert_array_equal(d_mu_combine(f, b, -1), b)
    np.testing.assert_allclose(d_mu_combine(f, b, 0), [2.0, 0.0])
    assert d_mu_combine(OU, -OU, 1) is OU
    x = np.array([[0.7]])
    np.testing.assert_allclose(d_mu_combine(OU, -OU, 0)(0.2, x), 0.0)
    with pytest.raises(TypeError):
        d_mu_combine(OU, f, 0)
    with pytest.raises(ValueError):
        d_mu_combine(f, np.zeros(3), 0)


def test_ou_current_velocity_vanishes(ou_ens):
    # stationary OU has zero current velocity (D + D_*) / 2
    p = _params()
    fwd = estimate_drift(ou_ens, 0.5, GRID, p, "forward")
    bwd = estimate_drift(ou_ens, 0.5, GRID, p, "backward")
    cur = d_mu_combine(fwd, bwd, 0)
    assert isinstance(cur, DriftEstimate)
    assert np.all(np.abs(cur.values) <= np.maximum(3 * cur.stderr, 0.03))
    other = estimate_drift(ou_ens, 0.4, GRID, p, "forward")
    with pytest.raises(ValueError):
        d_mu_combine(fwd, other, 0)


@pytest.mark.parametrize("mu", [1.0, -1.0])
def test_chain_rule_for_square(bm_ens, mu):
    # forward: D x^2 = 1; backward: D_* x^2 = 2x . b_* - 1 with b_* = x / (1 + t)
    p = _params(mu=mu)
    res = chain_rule_check(_square(), bm_ens, p, 0.5, GRID)
    # the backward quotient carries O(h) and O(bw^2) biases of about 0.03 at this resolution
    assert np.all(np.abs(res["gap"]) <= 3 * res["stderr"] + 0.05), res["gap"]
    expect = np.ones(len(GRID)) if mu == 1 else 2 * GRID[:, 0] ** 2 / 1.5 - 1
    assert np.all(np.abs(res["lhs"] - expect) <= 3 * res["lhs_stderr"] + 0.1)


def test_chain_rule_requires_jet(bm_ens):
    f = ScalarField(lambda t, x: x[..., 0], 1)
    with pytest.raises(ValueError):
        chain_rule_check(f, bm_ens, _params(), 0.5, GRID)


@pytest.mark.parametrize("mu", [1.0, 0.0, -1.0])
def test_product_rule_on_ou(ou_ens, mu):
    res = product_rule_check(ou_ens, ou_ens, mu, [0.3, 0.5, 0.7], _params(pool=0.0))
    assert res["passed"], res["rows"]


def test_product_rule_on_brownian_motion(bm_ens):
    # d/dt E|X|^2 = 1 for unit Brownian motion
    res = product_rule_check(bm_ens, bm_ens, 1.0, [0.5], _params(pool=0.0))
    row = res["rows"][0]
    assert res["passed"]
    assert abs(row["rhs"] - 1.0) <= 3 * row["rhs_stderr"]


def test_product_rule_grid_mismatch(ou_ens, bm_ens):
    other = simulate(DiffusionSpec(OU, 1.0, InitialLaw.gaussian([0.0], [0.5])), 100, 1e-3, seed=1,
                     record_every=10)
    with pytest.raises(ValueError):
        product_rule_check(ou_ens, other, 0.0, [0.5], _params(pool=0.0))


def test_reversal_identity_ou(ou_ens):
    # the reversal of stationary OU is OU again
    res = reversal_identity_check(ou_ens, _params(), 0.5, GRID, oracle=OU)
    assert res["passed"], (res["max_gap"], res["oracle_max_gap"])


def test_reversal_identity_brownian_from_gaussian(bm_ens):
    # X_0 ~ N(0, 1): rho_s = N(0, 1 + s), so the reversed forward drift is -x / (2 - t)
    oracle = VectorField(lambda t, x: -x / (2.0 - t)[..., None], 1, name="reversed bm")
    res = reversal_identity_check(bm_ens, _params(), 0.3, GRID, oracle=oracle)
    assert res["passed"], (res["max_gap"], res["oracle_max_gap"])


def test_reversal_identity_needs_noise():
    spec = DiffusionSpec(OU, 0.0, InitialLaw.gaussian([0.0], [0.5]), class_tag="Lambda0")
    ens = simulate(spec, 100, 1e-2, seed=0)
    with pytest.raises(ValueError):
        reversal_identity_check(ens, _params(h=0.02, t_buffer=0.1), 0.5, GRID)
