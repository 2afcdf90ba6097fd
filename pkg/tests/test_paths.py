import numpy as np
import pytest

from slab.exceptions import ConfigError
from slab.fields import VectorField, exact_flow
from slab.paths import (BLOCK, DiffusionSpec, InitialLaw, block_rng, brownian_bridge_ensemble,
                        drift_integral_ensemble, read_csv, reverse_ensemble, simulate)

ZERO = VectorField.constant([0.0])
OU = VectorField.affine([[-1.0]], name="ou")


def bm_spec(dim=1, sigma=1.0, x0=0.0):
    return DiffusionSpec(VectorField.constant(np.zeros(dim)), sigma, InitialLaw.point([x0] * dim))


def test_brownian_variance():
    n = 100_000
    ens = simulate(bm_spec(), n, 0.01, seed=3)
    var = ens.at(1.0)[:, 0].var()
    assert abs(var - 1.0) <= 3 * np.sqrt(2 / n)


def test_no_noise_no_drift_is_constant():
    spec = DiffusionSpec(VectorField.constant([0.0, 0.0]), 0.0, InitialLaw.point([1.5, -2.0]),
                         class_tag="Lambda0")
    ens = simulate(spec, 50, 0.1, seed=0)
    assert np.all(ens.states == np.array([1.5, -2.0]))


def test_stationary_ou_variance():
    n = 50_000
    spec = DiffusionSpec(OU, 1.0, InitialLaw.gaussian([0.0], [0.5]))
    ens = simulate(spec, n, 1e-3, seed=7, record_every=250)
    var = ens.states[:, :, 0].var(axis=0)
    assert np.all(np.abs(var - 0.5) <= 3 * 0.5 * np.sqrt(2 / n))


def test_rk4_rigid_rotation_is_accurate():
    rr = exact_flow("rigid_rotation", omega=1.0).velocity
    spec = DiffusionSpec(rr, 0.0, InitialLaw.point([1.0, 0.0]), class_tag="Lambda0")
    ens = simulate(spec, 2, 0.01, seed=0)
    np.testing.assert_allclose(ens.at(1.0)[0], [np.cos(1.0), np.sin(1.0)], atol=1e-9)
    assert ens.meta["scheme"] == "rk4"


def test_seed_and_workers_do_not_change_results():
    spec = DiffusionSpec(OU, 1.0, InitialLaw.gaussian([0.0], [0.5]))
    n = 2 * BLOCK + 17
    a = simulate(spec, n, 0.01, seed=5, workers=1)
    b = simulate(spec, n, 0.01, seed=5, workers=4)
    c = simulate(spec, n, 0.01, seed=6, workers=1)
    assert np.array_equal(a.states, b.states)
    assert not np.array_equal(a.states, c.states)
    # a prefix of paths does not depend on how many paths follow
    d = simulate(spec, BLOCK, 0.01, seed=5)
    assert np.array_equal(a.states[:BLOCK], d.states)


def test_streams_are_independent():
    x = block_rng(0, "simulation", 0).standard_normal(1000)
    y = block_rng(0, "controls", 0).standard_normal(1000)
    assert abs(np.corrcoef(x, y)[0, 1]) < 0.15


def test_noise_refinement_shares_brownian_path():
    spec = bm_spec()
    coarse = simulate(spec, 100, 0.02, seed=1, noise_refinement=2)
    fine = simulate(spec, 100, 0.01, seed=1, record_every=2)
    np.testing.assert_allclose(coarse.states, fine.states, atol=1e-12)


def test_states_are_read_only():
    ens = simulate(bm_spec(), 10, 0.1, seed=0)
    with pytest.raises(ValueError):
        ens.states[0, 0, 0] = 1.0


def test_spec_validation():
    with pytest.raises(ConfigError):
        DiffusionSpec(OU, 0.0, InitialLaw.point([0.0]))
    with pytest.raises(ConfigError):
        DiffusionSpec(OU, 1.0, InitialLaw.point([0.0]), class_tag="Lambda0")
    with pytest.raises(ConfigError):
        DiffusionSpec(OU, 1.0, InitialLaw.point([0.0, 0.0]))
    with pytest.raises(ConfigError):
        simulate(bm_spec(), 10, 0.3, seed=0)
    with pytest.raises(ConfigError):
        simulate(bm_spec(), 10, 0.01, seed=0, record_every=7)
    with pytest.raises(ConfigError):
        InitialLaw.from_dict({"kind": "cauchy"})


def test_bridge_pinned_and_spread():
    n = 20_000
    B = brownian_bridge_ensemble(1.0, 1.0, n, 0.01, seed=2, dim=2)
    assert np.all(B.states[:, -1] == 0.0)
    var0 = B.states[:, 0].var(axis=0)
    assert np.all(np.abs(var0 - 1.0) <= 3 * np.sqrt(2 / n))
    assert B.drift_direction == "backward"


def test_reverse_involution_and_terminal_zero():
    W = simulate(bm_spec(2), 200, 0.01, seed=4)
    R = reverse_ensemble(W)
    assert np.all(R.states[:, -1] == 0.0)
    RR = reverse_ensemble(R)
    assert np.array_equal(RR.states, W.states)
    assert RR.label == W.label and RR.drift_direction == W.drift_direction
    const = simulate(DiffusionSpec(ZERO, 0.0, InitialLaw.point([0.7]), class_tag="Lambda0"),
                     3, 0.1, seed=0)
    assert np.array_equal(reverse_ensemble(const).states, const.states)


def test_drift_integral_simple_fields():
    B = brownian_bridge_ensemble(1.0, 1.0, 100, 0.01, seed=0, dim=2)
    init = InitialLaw.gaussian([0.0, 0.0], [1.0, 1.0])
    zero = drift_integral_ensemble(VectorField.constant([0.0, 0.0]), 1.0, B, init, seed=0)
    assert np.all(zero.states == zero.states[:, :1])
    c = np.array([0.5, -1.0])
    lin = drift_integral_ensemble(VectorField.constant(c), 1.0, B, init, seed=0)
    expected = np.broadcast_to(B.times[None, :, None] * c, lin.states.shape)
    np.testing.assert_allclose(lin.states - lin.states[:, :1], expected, atol=1e-12)


def test_drift_integral_matches_refined_quadrature():
    ident = VectorField.affine(np.eye(2))
    init = InitialLaw.point([0.0, 0.0])
    coarse_B = brownian_bridge_ensemble(1.0, 1.0, 200, 0.001, seed=9, dim=2, record_every=10)
    fine_B = brownian_bridge_ensemble(1.0, 1.0, 200, 0.001, seed=9, dim=2)
    coarse = drift_integral_ensemble(ident, 1.0, coarse_B, init, seed=0)
    # trapezoid rule on the fine grid of the same Brownian path
    fb = fine_B.states
    trap = np.sum(0.5 * (fb[:, 1:] + fb[:, :-1]), axis=1) * 0.001
    err = np.abs(coarse.states[:, -1] - trap)
    assert np.sqrt(np.mean(err**2)) < 0.05


def test_csv_round_trip(tmp_path):
    ens = simulate(bm_spec(2), 5, 0.1, seed=0)
    path = ens.to_csv(tmp_path / "e.csv")
    times, states = read_csv(path)
    assert np.array_equal(times, ens.times)
    assert np.array_equal(states, ens.states)
    header = open(path).readline().strip()
    assert header == "path,k,t,x1,x2"
