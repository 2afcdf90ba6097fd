"""Acceptance suite: one test per criterion at desk scale (d = 2, T = 1, dt = 1e-3).

Each test is tagged with ``@pytest.mark.criterion``; the session prints one PASS/FAIL line per
criterion at the end (see ``conftest.py``).  Scenario runs use the shipped defaults and seed 0
and are cached per module, so the full suite takes roughly a quarter of an hour.
"""
import re

import numpy as np
import pytest

from slab.fields import ScalarField, ScalarJet, VectorField
from slab.lab import make_config, run_scenario
from slab.lab.convergence import ns_convergence, ou_convergence
from slab.nelson import (NelsonParams, chain_rule_check, estimate_drift, product_rule_check,
                         reversal_identity_check)
from slab.paths import DiffusionSpec, InitialLaw, simulate

N = 200_000
GRID = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])[:, None]
OU = VectorField.affine([[-1.0]], name="ou")


@pytest.fixture(scope="module")
def ou_ens():
    spec = DiffusionSpec(OU, 1.0, InitialLaw.gaussian([0.0], [0.5]), name="ou")
    return simulate(spec, N, 1e-3, seed=0, record_every=10)


@pytest.fixture(scope="module")
def bm_ens():
    spec = DiffusionSpec(VectorField.constant([0.0]), 1.0, InitialLaw.point([0.0]), name="bm")
    return simulate(spec, N, 1e-3, seed=0, record_every=10)


_REPORTS = {}


def report(scenario):
    if scenario not in _REPORTS:
        _REPORTS[scenario] = run_scenario(make_config(scenario, seed=0))
    return _REPORTS[scenario]


def checks(rep, *names):
    by_name = {c.name: c for c in rep.checks}
    return [by_name[n] for n in names]


def describe(cs):
    return ", ".join(f"{c.name}: {c.value:.3g} {c.relation} {c.tolerance:.3g}" for c in cs)


def _square():
    def jet(t, x):
        return ScalarJet(np.zeros(x.shape[:-1]), 2 * x, np.full(x.shape[:-1], 2.0))

    return ScalarField(lambda t, x: x[..., 0] ** 2, 1, jet=jet, name="x^2")


@pytest.mark.criterion(1, "OU backward drift matches b_*(x) = x on the grid at t = 0.5")
def test_ou_backward_drift(ou_ens, record_property):
    est = estimate_drift(ou_ens, 0.5, GRID, NelsonParams(h=0.02, bandwidth=0.1, t_buffer=0.1),
                         "backward")
    err = np.abs(est.values[:, 0] - GRID[:, 0])
    tol = np.maximum(3 * est.stderr[:, 0], 0.05)
    record_property("detail", f"max error {err.max():.4f}, tolerance {tol.min():.4f}")
    assert np.all(err <= tol)


@pytest.mark.criterion(2, "product rule for X = Y = Brownian motion, mu = +1, t = 0.5")
def test_product_rule(bm_ens, record_property):
    # a long lag keeps the centred difference of E[X^2] cheap in noise; it is exact for BM
    res = product_rule_check(bm_ens, bm_ens, 1.0, [0.5], NelsonParams(h=0.1, t_buffer=0.1))
    row = res["rows"][0]
    record_property("detail", f"lhs {row['lhs']:.4f}, rhs {row['rhs']:.4f}")
    assert abs(row["lhs"] - 1) <= 0.03 and abs(row["rhs"] - 1) <= 0.03


@pytest.mark.criterion(3, "empirical D(W^2) lies in [0.97, 1.03] on the probe grid")
def test_chain_rule(bm_ens, record_property):
    # the quotient of W^2 has conditional mean exactly 1, so smoothing adds no bias and a wide
    # kernel pooled over the whole window only removes noise
    params = NelsonParams(h=0.02, bandwidth=0.5, t_buffer=0.1, pool=0.4, mu=1.0)
    res = chain_rule_check(_square(), bm_ens, params, 0.5, GRID)
    lhs = res["lhs"]
    record_property("detail", f"range [{lhs.min():.4f}, {lhs.max():.4f}]")
    assert np.all((lhs >= 0.97) & (lhs <= 1.03))


@pytest.mark.criterion(4, "forward drift of reversed OU equals phi(b_*) within 3 combined stderr")
def test_reversal_identity(ou_ens, record_property):
    params = NelsonParams(h=0.02, bandwidth=0.1, t_buffer=0.1)
    res = reversal_identity_check(ou_ens, params, 0.5, GRID, oracle=OU)
    z = np.max(np.abs(res["gap"]) / res["stderr"])
    record_property("detail", f"max gap {res['max_gap']:.2e} ({z:.2f} stderr), "
                              f"oracle gap {res['oracle_max_gap']:.4f}")
    assert res["passed"]


@pytest.mark.criterion(5, "Navier-Stokes (Taylor-Green, nu = 0.05) is SEL-critical, control rejected")
def test_navier_stokes(record_property):
    rep = report("navier_stokes")
    cs = checks(rep, "forward SEL residual (regression)", "forward SEL residual (chain rule)",
                "forward N1 criticality", "control (viscosity x2) SEL residual ratio",
                "control rejected by bump variations")
    record_property("detail", describe(cs))
    assert all(c.passed for c in cs) and rep.verdict == "pass", rep.summary_lines()


@pytest.mark.criterion(6, "obstruction: GSEL residual >= 5x, D_*(DX) matches the mixed-forward field")
def test_obstruction(record_property):
    rep = report("obstruction")
    cs = checks(rep, "GSEL residual / reversed-drift SEL residual",
                "empirical D_*(DX) minus mixed-forward field (grid RMS)")
    record_property("detail", describe(cs))
    assert cs[0].value >= 5
    assert all(c.passed for c in cs) and rep.verdict == "pass", rep.summary_lines()


@pytest.mark.criterion(7, "Euler (rigid rotation): bump |dF| <= 1e-6 ||Z||, pressure x2 control >= 10x")
def test_euler(record_property):
    rep = report("euler")
    cs = checks(rep, "max bump |dF| / ||Z||", "control (pressure x2) max |dF| / threshold")
    record_property("detail", describe(cs))
    assert cs[0].value <= 1e-6 and cs[1].value >= 10
    assert all(c.passed for c in rep.checks), rep.summary_lines()


@pytest.mark.criterion(8, "Stokes (shear mode, nu = 0.1): D_*B vanishes, residual passes, control 5x")
def test_stokes(record_property):
    rep = report("stokes")
    cs = checks(rep, "backward drift of the bridge at T/2 (RMS)", "momentum residual with estimated D_*B",
                "control momentum residual exceeds tolerance", "control / base momentum residual")
    record_property("detail", describe(cs))
    assert cs[3].value >= 5
    assert all(c.passed for c in cs) and rep.verdict == "pass", rep.summary_lines()


@pytest.mark.criterion(9, "temperature: kernel densities vs Fokker-Planck solve and heat kernel, L1 <= 0.05")
def test_temperature(record_property):
    rep = report("temperature")
    names = [f"density vs Fokker-Planck grid solve, L1 at t={t:g}" for t in (0.25, 0.5, 1.0)]
    names.append("heat-kernel density of sqrt(2 kappa) B_bar at t=0.5, L1")
    cs = checks(rep, *names)
    record_property("detail", ", ".join(f"{c.value:.4f}" for c in cs))
    assert all(c.value <= 0.05 for c in cs)
    assert rep.verdict == "pass", rep.summary_lines()


def _report_bytes(path):
    text = path.read_text()
    return re.sub(r'"wall_clock": [^,\n]*', '"wall_clock": null', text).encode()


@pytest.mark.criterion(10, "identical config and seed give a byte-identical report.json, SLAB_WORKERS 1 or 8")
def test_reproducibility(tmp_path, monkeypatch, record_property):
    # three RNG blocks per ensemble, so the worker count actually changes the schedule
    runs = [(s, {"n_paths": 20_000}) for s in ("navier_stokes", "obstruction", "stokes", "temperature")]
    runs.append(("euler", {}))
    same = []
    for scenario, overrides in runs:
        blobs = []
        for workers in ("1", "8"):
            monkeypatch.setenv("SLAB_WORKERS", workers)
            out = tmp_path / f"{scenario}-{workers}"
            run_scenario(make_config(scenario, overrides, seed=3), out)
            blobs.append(_report_bytes(out / "report.json"))
        same.append(blobs[0] == blobs[1])
    record_property("detail", ", ".join(f"{s}: {'identical' if ok else 'DIFFERENT'}"
                                        for (s, _), ok in zip(runs, same)))
    assert all(same)


@pytest.mark.criterion(11, "halving dt and h shrinks the OU drift and Navier-Stokes residual biases")
def test_convergence(record_property):
    ou = ou_convergence()
    ns = ns_convergence(make_config("navier_stokes", seed=0))
    fmt = lambda r: " > ".join(f"{e:.4f}" for e in r["errors"])  # noqa: E731
    record_property("detail", f"OU {fmt(ou)}; NS {fmt(ns)}")
    assert ou["passed"], ou
    assert ns["passed"], ns
