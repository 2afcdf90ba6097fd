import numpy as np
import pytest

from slab.action import (LagrangianSpec, Thresholds, VariationSpec, action_value, config_hash,
                         criticality_test, default_bridges, default_bumps, el_residual,
                         finite_difference_variation, first_variation, first_variations,
                         simpson_weights)
from slab.fields import ScalarField, ScalarJet, VectorField, exact_flow, zero_scalar
from slab.nelson import NelsonParams
from slab.paths import DiffusionSpec, InitialLaw, simulate

P = NelsonParams(h=0.01, bandwidth=0.3, t_buffer=0.1)
OU2 = VectorField.affine(-np.eye(2), name="ou")


def _quadratic_potential(c):
    """``p = c |x|^2 / 2`` with its exact jet."""

    def func(t, x):
        return 0.5 * c * np.sum(x * x, axis=-1)

    def jet(t, x):
        return ScalarJet(np.zeros(x.shape[:-1]), c * x, np.full(x.shape[:-1], 2.0 * c))

    return ScalarField(func, 2, jet=jet, name=f"{c:g}|x|^2/2")


@pytest.fixture(scope="module")
def rotation():
    flow = exact_flow("rigid_rotation", omega=1.0)
    spec = DiffusionSpec(flow.velocity, 0.0, InitialLaw.gaussian([1.0, 0.5], [0.1, 0.1]),
                         class_tag="Lambda0")
    return flow, simulate(spec, 2000, 1e-3, seed=2)


@pytest.fixture(scope="module")
def ou_ens():
    spec = DiffusionSpec(OU2, 1.0, InitialLaw.gaussian([0.0, 0.0], [0.5, 0.5]))
    return simulate(spec, 20_000, 1e-2, seed=8)


def test_simpson_weights_integrate_polynomials():
    t = np.linspace(0.1, 0.9, 9)
    w = simpson_weights(t)
    assert np.isclose(w.sum(), 0.8)
    assert np.isclose(w @ t**2, (0.9**3 - 0.1**3) / 3)


def test_uniform_flow_action():
    c = np.array([0.3, -0.4])
    flow = exact_flow("uniform", c=c)
    spec = DiffusionSpec(flow.velocity, 0.0, InitialLaw.point([0.0, 0.0]), class_tag="Lambda0")
    ens = simulate(spec, 10, 1e-2, seed=0)
    F, se = action_value(ens, LagrangianSpec(flow.pressure), 1.0, P)
    assert F == pytest.approx(0.8 * 0.25 / 2, abs=1e-12)
    assert se == 0.0


def test_brownian_free_action_is_zero():
    spec = DiffusionSpec(VectorField.constant([0.0, 0.0]), 1.0, InitialLaw.point([0.0, 0.0]))
    ens = simulate(spec, 500, 1e-2, seed=0)
    F, _ = action_value(ens, LagrangianSpec(zero_scalar(2)), 1.0, P)
    assert F == 0.0


def test_stationary_ou_current_velocity_action_is_small(ou_ens):
    # the current velocity of stationary OU vanishes; only the kernel estimate's error remains
    F, se = action_value(ou_ens, LagrangianSpec(zero_scalar(2)), 0.0, P, bandwidth=0.3)
    assert 0 <= F < 0.02


def test_zero_amplitude_variation(rotation):
    flow, ens = rotation
    L = LagrangianSpec(flow.pressure)
    dF, se = first_variation(ens, L, VariationSpec.bump(1, [1.0, 0.0], eps=0.0), 1.0, P)
    assert dF == 0.0 and se == 0.0
    zs = [VariationSpec.bump(m, e, 0.0) for m in (1, 2, 3, 4) for e in ([1, 0], [0, 1])]
    rep = criticality_test(ens, L, zs, 1.0, P)
    assert rep.verdict == "inconclusive"


def test_rigid_rotation_is_critical(rotation):
    flow, ens = rotation
    L = LagrangianSpec(flow.pressure)
    zs = default_bumps(2) + default_bridges(2)
    res = first_variations(ens, L, zs, 1.0, P)
    for r in res[:8]:
        assert abs(r["dF"]) <= 1e-6 * r["norm_Z"]
    rep = criticality_test(ens, L, zs, 1.0, P, Thresholds(rel=1e-6), scale=1.0)
    assert rep.verdict == "critical"


def test_wrong_pressure_is_not_critical(rotation):
    flow, ens = rotation
    L = LagrangianSpec(flow.pressure * 2.0)
    res = first_variations(ens, L, default_bumps(2), 1.0, P)
    assert max(abs(r["dF"]) / r["norm_Z"] for r in res) >= 0.1
    rep = criticality_test(ens, L, default_bumps(2), 1.0, P, Thresholds(rel=1e-6), scale=1.0)
    assert rep.verdict == "not-critical"


def test_too_few_variations(rotation):
    flow, ens = rotation
    with pytest.raises(ValueError):
        criticality_test(ens, LagrangianSpec(flow.pressure), default_bumps(2)[:4], 1.0, P)


def test_weak_form_matches_finite_difference(ou_ens):
    L = LagrangianSpec(_quadratic_potential(0.7))
    for Z in (VariationSpec.bump(1, [1.0, 0.0]), VariationSpec.bump(3, [0.6, 0.8])):
        dF, se = first_variation(ou_ens, L, Z, 1.0, P)
        fd, fd_se = finite_difference_variation(ou_ens, L, Z, 1.0, [0.5, 1.0, 2.0], P)
        # L is quadratic, so the linear fit in eps removes the curvature term exactly
        assert fd == pytest.approx(dF, rel=1e-8, abs=1e-12)
        one, _ = finite_difference_variation(ou_ens, L, Z, 1.0, [1.0], P)
        assert abs(one - dF) > 1e-6


def test_finite_difference_rejects_bridges(ou_ens):
    L = LagrangianSpec(zero_scalar(2))
    with pytest.raises(ValueError):
        finite_difference_variation(ou_ens, L, VariationSpec.bridge([1.0, 0.0]), 1.0, [1.0], P)
    with pytest.raises(ValueError):
        finite_difference_variation(ou_ens, L, VariationSpec.bump(1, [1.0, 0.0]), 1.0, [0.0], P)


def test_rotation_residuals_vanish(rotation):
    flow, ens = rotation
    L = LagrangianSpec(flow.pressure)
    for form in ("SEL", "GSEL"):
        r = el_residual(ens, L, 1.0, form, P, [0.3, 0.5, 0.7])
        assert r.norm <= 1e-10 and r.relative <= 1e-10


def test_ou_satisfies_sel_not_gsel(ou_ens):
    # forward drift -x with potential -|x|^2/2: D(-X) = X = dL/dx, while D_*(-X) = -X
    L = LagrangianSpec(_quadratic_potential(-1.0))
    times = [0.3, 0.5, 0.7]
    sel = el_residual(ou_ens, L, 1.0, "SEL", P, times)
    assert sel.norm <= 1e-12
    bw = 0.3
    gsel = el_residual(ou_ens, L, 1.0, "GSEL", P, times, bandwidth=bw)
    # the residual is -x - D_*X; the kernel density of N(0, 0.5) has variance 0.5 + bw^2, so
    # the estimated D_*X is x / (0.5 + bw^2) - x and the RMS of the residual is 1 / (0.5 + bw^2)
    assert gsel.norm == pytest.approx(1 / (0.5 + bw**2), rel=0.03)
    grid = np.array([[x, y] for x in (-0.5, 0.0, 0.5) for y in (-0.5, 0.0, 0.5)])
    emp = el_residual(ou_ens, L, 1.0, "SEL", NelsonParams(h=0.02, bandwidth=0.3, t_buffer=0.1,
                                                          pool=0.2), times, grid, route="empirical")
    assert np.all(np.abs(emp.values) <= 3 * emp.stderr + 0.05)


def test_residual_validation(rotation):
    flow, ens = rotation
    L = LagrangianSpec(flow.pressure)
    with pytest.raises(ValueError):
        el_residual(ens, L, 1.0, "XYZ", P, [0.5])
    with pytest.raises(ValueError):
        el_residual(ens, L, 1.0, "SEL", P, [0.5], route="empirical")
    with pytest.raises(ValueError):
        LagrangianSpec(flow.pressure, sign="plus_p")


def test_reversed_potential():
    flow = exact_flow("taylor_green", nu=0.1)
    L = LagrangianSpec(flow.pressure, "plus_p_bar")
    x = np.array([[0.3, 1.1]])
    t = np.array([0.2])
    assert L.value(t, x, np.zeros((1, 2)))[0] == pytest.approx(-flow.pressure(np.array([0.8]), x)[0])


def test_variation_spec_validation():
    with pytest.raises(ValueError):
        VariationSpec.bump(1, [1.0, 1.0])
    with pytest.raises(ValueError):
        VariationSpec.bump(0, [1.0, 0.0])
    with pytest.raises(ValueError):
        VariationSpec("other", (1.0, 0.0))
    g, dg = VariationSpec.bump(2, [1.0]).profile(np.array([0.0, 0.1, 0.9, 1.0]), 0.1, 0.9)
    np.testing.assert_allclose(g, [0.0, 0.0, 0.0, 0.0], atol=1e-12)


def test_report_serialises(rotation):
    flow, ens = rotation
    rep = criticality_test(ens, LagrangianSpec(flow.pressure), default_bumps(2), 1.0, P,
                           Thresholds(rel=1e-6), scale=1.0)
    text = rep.to_json()
    assert '"verdict": "critical"' in text


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": [1.0, 2.0]}) == config_hash({"b": [1.0, 2.0], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
    assert len(config_hash({})) == 16
