"""End-to-end scenario runners.

Each runner builds its ensembles from the config seed (named substreams ``simulation``,
``bridge``, ``initial``, ``variations`` and ``controls``), runs its checks, including at
least one perturbed run that must be rejected, and returns a :class:`ScenarioReport`.
"""
from __future__ import annotations

import os
import time

import numpy as np
from scipy import ndimage

from ..action import (LagrangianSpec, Thresholds, VariationSpec, criticality_test, el_residual,
                      weighted_norm)
from ..exceptions import ConfigError, EstimationError, SlabError
from ..estimators import GaussianKDE
from ..fields import ScalarJet, ScalarField, VectorField, exact_flow, gaussian_density, time_reverse_field
from ..nelson import NelsonParams, estimate_density, estimate_drift, regress_quotient
from ..paths import (DiffusionSpec, InitialLaw, brownian_bridge_ensemble, drift_integral_ensemble,
                     reverse_ensemble, simulate)
from ..residuals import (DensityResidualKind, MomentumResidualKind, density_residual,
                         momentum_scale)
from .config import ScenarioConfig
from .fokker_planck import solve_fokker_planck
from .report import Check, ScenarioReport


def probe_points(cfg):
    c = np.asarray(cfg.probe["center"], dtype=float)
    g = np.linspace(-cfg.probe["half_width"], cfg.probe["half_width"], int(cfg.probe["n"]))
    mesh = np.meshgrid(*([g] * c.size), indexing="ij")
    return c + np.stack([m.ravel() for m in mesh], axis=-1)


def _thresholds(cfg):
    th = cfg.thresholds
    return Thresholds(rel=th.get("rel", 0.02), n_se=th.get("n_se", 3.0),
                      fail_factor=th.get("fail_factor", 3.0))


def _variations(cfg, dim, bridges=False):
    v = cfg.variations
    eps = v.get("eps", 0.1)
    out = [VariationSpec.bump(m, np.eye(dim)[j], eps) for m in v.get("modes", [1, 2, 3, 4])
           for j in range(dim)]
    if bridges:
        out += [VariationSpec.bridge(np.eye(dim)[i % dim], eps, index=i)
                for i in range(v.get("bridges", 4))]
    return out


def _flow(cfg, tag, **override):
    params = {**cfg.flow_kwargs(), **override}
    flow = exact_flow(cfg.flow, cfg.T, **params)
    if tag not in flow.satisfies:
        raise ConfigError(f"flow {cfg.flow} {params} does not solve the {tag} equations")
    return flow


def _dump(cfg, out_dir, report, ens, name):
    if cfg.dump and out_dir:
        os.makedirs(out_dir, exist_ok=True)
        ens.to_csv(os.path.join(out_dir, f"{name}.csv"), cfg.max_dump_paths)
        report.artifacts.append(f"{name}.csv")


def _guarded(report, name, role, fn):
    """Run one check; estimation failures become an inconclusive check with diagnostics."""
    try:
        return report.add(fn())
    except (EstimationError, FloatingPointError) as exc:
        return report.add(Check(name, None, None, False, role, status="inconclusive",
                                detail={"error": f"{type(exc).__name__}: {exc}"}))


def _excess(r):
    """``|dF| / threshold`` with ``0 / 0 = 0``."""
    if r["threshold"] > 0:
        return abs(r["dF"]) / r["threshold"]
    return 0.0 if r["dF"] == 0 else np.inf


def _critical_check(name, rep, role="mandatory", expect="critical"):
    worst = max(_excess(r) for r in rep.variations)
    if expect == "critical":
        return Check(name, worst, 1.0, rep.verdict == "critical", role, relation="<=",
                     detail={"verdict": rep.verdict})
    return Check(name, worst, rep.thresholds["fail_factor"], rep.verdict == "not-critical", role,
                 relation=">=", detail={"verdict": rep.verdict})


def _ratio_check(name, value, base, ratio, role="control"):
    r = value / base if base > 0 else np.inf
    return Check(name, float(r), ratio, bool(r >= ratio), role, relation=">=",
                 detail={"value": value, "reference": base})


# ---------------------------------------------------------------- Navier-Stokes


def scenario_navier_stokes(cfg: ScenarioConfig, out_dir=None) -> ScenarioReport:
    """Reversed-drift diffusion of a Navier-Stokes flow and its time reversal.

    The diffusion ``X`` with drift ``u_bar = -u(T - t, x)`` and ``sigma = sqrt(2 nu)`` must
    solve the forward Euler-Lagrange equation of ``|v|^2 / 2 + p_bar`` and be critical for
    bump variations; its pathwise reversal has backward drift ``u`` and must do the same
    for ``|v|^2 / 2 - p`` with the backward derivative.  The control doubles the viscosity
    of the simulated process.
    """
    report = ScenarioReport("navier_stokes", cfg.to_dict(), cfg.seed,
                            statement="forward-drift u_bar diffusion is N1-critical for "
                                      "|v|^2/2 + p_bar; its reversal is N1-critical for "
                                      "|v|^2/2 - p with the backward derivative")
    flow = _flow(cfg, "navier_stokes")
    u, p = flow.velocity, flow.pressure
    ubar = time_reverse_field(u)
    init = InitialLaw.from_dict(cfg.initial)
    th = cfg.thresholds
    pts, tg = probe_points(cfg), cfg.probe_times
    mu = 1 if cfg.mu is None else cfg.mu
    spec = DiffusionSpec(ubar, cfg.sigma, init, cfg.T, name="X(u_bar)")
    ens = simulate(spec, cfg.n_paths, cfg.dt, cfg.seed, cfg.record_every, stream="simulation")
    _dump(cfg, out_dir, report, ens, "paths_u_bar")
    params = NelsonParams.default(ens, **cfg.nelson)
    wparams = NelsonParams.default(ens, t_buffer=params.t_buffer)
    bumps = _variations(cfg, ens.dim)
    L2 = LagrangianSpec(p, "plus_p_bar")
    L1 = LagrangianSpec(p, "minus_p")

    sel = el_residual(ens, L2, mu, "SEL", params, tg, pts, route="empirical")
    tol = th["residual_rel"] * sel.scale
    report.add(Check("forward SEL residual (regression)", sel.norm, tol, sel.norm <= tol,
                     detail={"raw": sel.norm_raw, "scale": sel.scale}))
    chain = el_residual(ens, L2, mu, "SEL", params, tg, route="chain")
    report.add(Check("forward SEL residual (chain rule)", chain.norm, tol, chain.norm <= tol))
    rep2 = criticality_test(ens, L2, bumps, mu, wparams, _thresholds(cfg))
    report.action_reports["forward"] = rep2.to_dict()
    report.add(_critical_check("forward N1 criticality", rep2))

    rev = reverse_ensemble(ens)
    sel1 = el_residual(rev, L1, -mu, "SEL", params, tg, pts, route="empirical")
    tol1 = th["residual_rel"] * sel1.scale
    report.add(Check("reversed backward SEL residual (regression)", sel1.norm, tol1,
                     sel1.norm <= tol1, detail={"raw": sel1.norm_raw, "scale": sel1.scale}))
    rep1 = criticality_test(rev, L1, bumps, -mu, wparams, _thresholds(cfg))
    report.action_reports["reversed"] = rep1.to_dict()
    report.add(_critical_check("reversed N1 criticality", rep1))

    def consistency():
        vals, ses, neffs, mags, zmax = [], [], [], [], 0.0
        for t in tg:
            est = regress_quotient(rev, t, pts, params, "backward",
                                   offset=lambda s, x: u(np.full(len(x), s), x))
            vals.append(est.values)
            ses.append(est.stderr)
            neffs.append(est.n_eff)
            mags.append(np.sum(u(np.full(len(pts), t), pts) ** 2, axis=-1))
            zmax = max(zmax, float(np.nanmax(np.abs(est.values) / est.stderr)))
        gap, raw = weighted_norm(np.stack(vals), np.stack(ses), np.stack(neffs))
        size = float(np.sqrt(np.average(np.stack(mags), weights=np.stack(neffs))))
        tol_u = th["residual_rel"] * size
        return Check("reversed backward drift minus u (weighted norm)", gap, tol_u, gap <= tol_u,
                     detail={"raw": raw, "max_abs_z": zmax, "velocity_scale": size})

    _guarded(report, "reversal consistency", "mandatory", consistency)
    base_sel = sel.norm
    del ens, rev

    scale = cfg.negative_control["magnitude"]
    ctl_spec = DiffusionSpec(ubar, cfg.sigma * np.sqrt(scale), init, cfg.T, name="control")
    ctl = simulate(ctl_spec, cfg.n_paths, cfg.dt, cfg.seed, cfg.record_every, stream="controls")
    sel_c = el_residual(ctl, L2, mu, "SEL", params, tg, pts, route="empirical")
    report.add(_ratio_check(f"control (viscosity x{scale:g}) SEL residual ratio", sel_c.norm,
                            base_sel, th["control_ratio"]))
    rep_c = criticality_test(ctl, L2, bumps, mu, wparams, _thresholds(cfg))
    report.action_reports["control"] = rep_c.to_dict()
    report.add(_critical_check("control rejected by bump variations", rep_c, "control",
                               expect="not-critical"))
    return report


# ---------------------------------------------------------------- obstruction


def _mixed_field(u, sigma, density_at, sign):
    """``d_t u + w . grad u + sign (sigma^2 / 2) Lap u`` with ``w = u - sigma^2 grad log rho``
    for ``sign = -1`` (backward carrier) and ``w = u`` for ``sign = +1``."""
    def field(s, x):
        tt = np.full(len(x), s)
        j = u.jet(tt, x)
        w = u(tt, x)
        if sign < 0:
            w = w - sigma**2 * density_at(s).grad_log(x)
        return j.dt + np.einsum("nij,nj->ni", j.jac, w) + sign * 0.5 * sigma**2 * j.lap
    return field


def scenario_obstruction(cfg: ScenarioConfig, out_dir=None) -> ScenarioReport:
    """Diffusion driven by the Navier-Stokes velocity itself (not reversed).

    Its backward derivative of ``D X`` follows the mixed equation with ``u_*`` as carrier and
    the wrong-sign Laplacian, so the unrestricted-variation (GSEL) residual is large, as is
    the forward one with the same Lagrangian, and bump variations reject criticality.  The
    reference is the forward SEL residual of the reversed-drift construction; the control
    is the ``sigma = 0`` limit, where the obstruction disappears.
    """
    report = ScenarioReport("obstruction", cfg.to_dict(), cfg.seed,
                            statement="diffusion with drift u is not critical; the mismatch "
                                      "is the sign of the Laplacian term")
    flow = _flow(cfg, "navier_stokes")
    u, p = flow.velocity, flow.pressure
    init = InitialLaw.from_dict(cfg.initial)
    th = cfg.thresholds
    pts, tg = probe_points(cfg), cfg.probe_times
    sigma = cfg.sigma
    L = LagrangianSpec(p, "minus_p")

    ens = simulate(DiffusionSpec(u, sigma, init, cfg.T, name="X(u)"), cfg.n_paths, cfg.dt,
                   cfg.seed, cfg.record_every, stream="simulation")
    _dump(cfg, out_dir, report, ens, "paths_u")
    params = NelsonParams.default(ens, **cfg.nelson)
    local = NelsonParams.default(ens, **{**cfg.nelson, "pool": 0.0})
    wparams = NelsonParams.default(ens, t_buffer=params.t_buffer)

    ref_ens = simulate(DiffusionSpec(time_reverse_field(u), sigma, init, cfg.T), cfg.n_paths,
                       cfg.dt, cfg.seed, cfg.record_every, stream="simulation")
    ref = el_residual(ref_ens, LagrangianSpec(p, "plus_p_bar"), 1, "SEL", params, tg, pts,
                      route="empirical")
    del ref_ens

    gsel = el_residual(ens, L, 1, "GSEL", params, tg, route="chain")
    report.add(_ratio_check("GSEL residual / reversed-drift SEL residual", gsel.norm, ref.norm,
                            th["control_ratio"], role="mandatory"))
    naive = el_residual(ens, L, 1, "SEL", params, tg, pts, route="empirical")
    report.add(_ratio_check("forward SEL residual / reversed-drift SEL residual", naive.norm,
                            ref.norm, th["control_ratio"], role="mandatory"))

    cache = {}

    def density_at(s):
        if s not in cache:
            cache[s] = estimate_density(ens, s)
        return cache[s]

    def match(direction, sign, name):
        def run():
            field = _mixed_field(u, sigma, density_at, sign)
            gaps, ses, zmax = [], [], []
            for t in tg:
                est = regress_quotient(ens, t, pts, local, direction, f=u, offset=field)
                ok = est.valid
                gaps.append(est.values[ok])
                ses.append(est.stderr[ok])
                zmax.append(float(np.max(np.abs(est.values[ok]) / est.stderr[ok])))
            gap = float(np.sqrt(np.mean(np.sum(np.concatenate(gaps) ** 2, axis=-1))))
            se = float(np.sqrt(np.mean(np.sum(np.concatenate(ses) ** 2, axis=-1))))
            return Check(name, gap, 3 * se, gap <= 3 * se, stderr=se,
                         detail={"max_abs_z_per_time": zmax})
        return run

    _guarded(report, "backward derivative of DX matches mixed-forward field", "mandatory",
             match("backward", -1, "empirical D_*(DX) minus mixed-forward field (grid RMS)"))
    _guarded(report, "forward derivative of DX matches mixed-backward field", "mandatory",
             match("forward", +1, "empirical D(DX) minus mixed-backward field (grid RMS)"))
    rep = criticality_test(ens, L, _variations(cfg, ens.dim), 1, wparams, _thresholds(cfg))
    report.action_reports["obstructed"] = rep.to_dict()
    report.add(_critical_check("bump variations reject criticality", rep, expect="not-critical"))
    del ens

    # sigma = 0 limit: the inviscid flow along its own characteristics
    flow0 = exact_flow(cfg.flow, cfg.T, **{**cfg.flow_kwargs(), "nu": 0.0})
    n0 = max(2, cfg.n_paths // 10)
    det = simulate(DiffusionSpec(flow0.velocity, 0.0, init, cfg.T, "Lambda0"), n0, cfg.dt,
                   cfg.seed, cfg.record_every, stream="controls")
    L0 = LagrangianSpec(flow0.pressure)
    g0 = el_residual(det, L0, 1, "GSEL", params, tg, route="chain")
    tol0 = 1e-6 * max(g0.scale, 1.0)
    report.add(Check("sigma = 0 limit: GSEL residual vanishes", g0.norm, tol0, g0.norm <= tol0,
                     role="control", detail={"scale": g0.scale}))
    return report


# ---------------------------------------------------------------- Euler


def scenario_euler(cfg: ScenarioConfig, out_dir=None) -> ScenarioReport:
    """Deterministic flow of an Euler solution from a spread initial law.

    Both bump and bridge variations must give a vanishing first variation (to quadrature
    accuracy for bumps); with a wrong pressure (the control) some bump must not.
    """
    report = ScenarioReport("euler", cfg.to_dict(), cfg.seed,
                            statement="deterministic Euler flow is critical for bump and "
                                      "bridge variations")
    flow = _flow(cfg, "euler")
    u, p = flow.velocity, flow.pressure
    init = InitialLaw.from_dict(cfg.initial)
    th = cfg.thresholds
    mu = 1 if cfg.mu is None else cfg.mu
    ens = simulate(DiffusionSpec(u, 0.0, init, cfg.T, "Lambda0", name="flow"), cfg.n_paths,
                   cfg.dt, cfg.seed, cfg.record_every, stream="simulation")
    _dump(cfg, out_dir, report, ens, "paths_flow")
    params = NelsonParams.default(ens, **cfg.nelson)
    variations = _variations(cfg, ens.dim, bridges=True)
    thr = _thresholds(cfg)
    scale = th.get("scale", 1.0)
    L = LagrangianSpec(p)
    rep = criticality_test(ens, L, variations, mu, params, thr, scale=scale)
    report.action_reports["flow"] = rep.to_dict()
    report.add(_critical_check("bump and bridge variations vanish", rep))
    bumps = [r for r in rep.variations if r["family"] == "n1_bump"]
    worst = max(abs(r["dF"]) / r["norm_Z"] for r in bumps)
    report.add(Check("max bump |dF| / ||Z||", worst, th["rel"], worst <= th["rel"]))
    tg = cfg.probe_times
    sel = el_residual(ens, L, mu, "SEL", params, tg, route="chain")
    gsel = el_residual(ens, L, mu, "GSEL", params, tg, route="chain")
    tol = th.get("residual_abs", 1e-6)
    report.add(Check("SEL residual", sel.norm, tol, sel.norm <= tol))
    report.add(Check("GSEL residual equals SEL residual", abs(gsel.norm - sel.norm), tol,
                     abs(gsel.norm - sel.norm) <= tol))

    mag = cfg.negative_control["magnitude"]
    Lc = LagrangianSpec(p * mag)
    rep_c = criticality_test(ens, Lc, variations, mu, params, thr, scale=scale)
    report.action_reports["control"] = rep_c.to_dict()
    factor = th.get("control_factor", 10.0)
    best = max(_excess(r) for r in rep_c.variations)
    report.add(Check(f"control (pressure x{mag:g}) max |dF| / threshold", best, factor,
                     rep_c.verdict == "not-critical" and best >= factor, "control", relation=">=",
                     detail={"verdict": rep_c.verdict}))
    return report


# ---------------------------------------------------------------- Stokes


def stokes_residual(u, p, nu, sigma_b, est, t):
    """``d_t u + sigma_b (grad u) D_*B - nu Lap u + grad p`` at ``sigma_b x`` on the estimate grid.

    Returns the ``n_eff``-weighted RMS with the propagated estimator noise removed (as for
    the regression residuals), the raw RMS and the momentum scale.
    """
    y = sigma_b * est.points
    tt = np.full(len(y), t)
    j = u.jet(tt, y)
    r = j.dt + sigma_b * np.einsum("nij,nj->ni", j.jac, est.values) - nu * j.lap + p.jet(tt, y).grad
    noise = sigma_b**2 * np.einsum("nij,nj->ni", j.jac**2, est.stderr**2)
    ok = est.valid
    w = np.where(ok, est.n_eff, 0.0)
    sq = np.sum(np.where(ok[:, None], r, 0.0) ** 2, axis=-1)
    nz = np.sum(np.where(ok[:, None], noise, 0.0), axis=-1)
    raw = float(np.sqrt(np.sum(w * sq) / w.sum()))
    deb = float(np.sqrt(max(np.sum(w * (sq - nz)) / w.sum(), 0.0)))
    scale = momentum_scale(MomentumResidualKind.stokes(nu), u, p, tt[ok], y[ok])
    return deb, raw, scale


def scenario_stokes(cfg: ScenarioConfig, out_dir=None) -> ScenarioReport:
    """Bridge-driven representation of a Stokes flow.

    ``X_t = X_0 + int_0^t u(s, sigma B_s) ds`` with ``B`` a bridge pinned at 0 at ``T`` and
    ``sigma = sqrt(2 nu)``.  Checks: the estimated backward drift of ``B`` vanishes; the
    chain-rule expression for ``D_*(D X)`` with that estimate solves the momentum equation;
    the bridge-evaluated action is critical.  The control perturbs the velocity by a
    steady ``magnitude * sin(x1) e1``.
    """
    report = ScenarioReport("stokes", cfg.to_dict(), cfg.seed,
                            statement="bridge-driven process is critical and its backward "
                                      "acceleration solves the Stokes equation")
    flow = _flow(cfg, "stokes")
    u, p = flow.velocity, flow.pressure
    nu, sb = cfg.nu, cfg.sigma
    th = cfg.thresholds
    pts = probe_points(cfg)
    B = brownian_bridge_ensemble(cfg.T, 1.0, cfg.n_paths, cfg.dt, cfg.seed, dim=u.dim,
                                 record_every=cfg.record_every)
    X = drift_integral_ensemble(u, sb, B, InitialLaw.from_dict(cfg.initial), cfg.seed)
    _dump(cfg, out_dir, report, B, "bridge")
    _dump(cfg, out_dir, report, X, "paths_x")
    t_mid = cfg.T / 2
    pa = NelsonParams.default(B, **cfg.nelson)
    pb = NelsonParams.default(B, **cfg.residual_nelson)

    est = estimate_drift(B, t_mid, pts, pa, "backward")
    ok = est.valid
    rms = float(np.sqrt(np.mean(np.sum(est.values[ok] ** 2, axis=-1))))
    rse = float(np.sqrt(np.mean(np.sum(est.stderr[ok] ** 2, axis=-1))))
    report.add(Check("backward drift of the bridge at T/2 (RMS)", rms, 3 * rse, rms <= 3 * rse,
                     stderr=rse))

    ests = [estimate_drift(B, t, pts, pb, "backward") for t in cfg.probe_times]
    base = [stokes_residual(u, p, nu, sb, e, t) for t, e in zip(cfg.probe_times, ests)]
    r0, s0 = max(b[0] for b in base), min(b[2] for b in base)
    tol = th["residual_rel"] * s0
    report.add(Check("momentum residual with estimated D_*B", r0, tol, r0 <= tol,
                     detail={"scale": s0, "raw": max(b[1] for b in base)}))

    L = LagrangianSpec(p)

    def state(k):
        return sb * B.states[:, k]

    def velocity(k):
        x = sb * B.states[:, k]
        return u(np.full(len(x), B.times[k]), x)

    wparams = NelsonParams.default(X, t_buffer=pa.t_buffer)
    rep = criticality_test(X, L, _variations(cfg, X.dim, bridges=True), 1, wparams,
                           _thresholds(cfg), state=state, velocity=velocity)
    report.action_reports["bridge_functional"] = rep.to_dict()
    report.add(_critical_check("bridge-evaluated action is critical", rep))

    mag = cfg.negative_control["magnitude"]
    bump = VectorField(lambda t, x: np.stack([mag * np.sin(x[..., 0]), np.zeros(x.shape[:-1])], -1),
                       u.dim, cfg.T, name=f"{mag:g} sin(x1) e1")
    uc = u + bump
    ctl = []
    for t, e in zip(cfg.probe_times, ests):
        ctl.append(stokes_residual(uc, p, nu, sb, e, t))
    rc = max(c[0] for c in ctl)
    tol_c = th["residual_rel"] * min(c[2] for c in ctl)
    report.add(Check("control momentum residual exceeds tolerance", rc, tol_c, rc > tol_c,
                     "control", relation=">"))
    report.add(_ratio_check("control / base momentum residual", rc, r0, th["control_ratio"]))
    return report


# ---------------------------------------------------------------- temperature


def kde_vs_reference_l1(kde_est, ref_density, axes, box_lo, box_hi):
    """L1 distance between a density estimate and a reference on the grid inside a box."""
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    dx = np.prod([ax[1] - ax[0] for ax in axes])
    inside = np.all((mesh >= box_lo) & (mesh <= box_hi), axis=-1)
    pts = mesh[inside]
    return float(np.sum(np.abs(kde_est(pts) - ref_density[inside])) * dx)


def kde_density_field(ens, bandwidth, horizon=None):
    """Scalar field built from kernel densities of ``ens`` at its record times.

    Values and space derivatives come from the kernel estimate at the nearest record time
    (Laplacian by central differences of the analytic gradient); the time derivative is a
    central difference across neighbouring record times (one-sided at the ends).
    """
    cache = {}
    d = ens.dt_record
    K = len(ens.times) - 1

    def kde(k):
        if k not in cache:
            cache[k] = GaussianKDE(bandwidth=bandwidth).fit(ens.states[:, k])
        return cache[k]

    def index(t):
        return int(np.clip(np.round(np.max(t) / d), 0, K))

    def func(t, x):
        return kde(index(t)).density(x.reshape(-1, x.shape[-1])).reshape(x.shape[:-1])

    def jet(t, x):
        k = index(t)
        pts = x.reshape(-1, x.shape[-1])
        dens = lambda j: kde(j).density(pts)
        if 0 < k < K:
            dt = (dens(k + 1) - dens(k - 1)) / (2 * d)
        elif k == K:
            dt = (3 * dens(K) - 4 * dens(K - 1) + dens(K - 2)) / (2 * d)
        else:
            dt = (-3 * dens(0) + 4 * dens(1) - dens(2)) / (2 * d)
        est = kde(k)
        e = 0.05 * est.bandwidth_
        lap = sum((est.gradient(pts + e * ax)[:, j] - est.gradient(pts - e * ax)[:, j]) / (2 * e)
                  for j, ax in enumerate(np.eye(pts.shape[1])))
        shape = x.shape[:-1]
        return ScalarJet(dt.reshape(shape), est.gradient(pts).reshape(x.shape), lap.reshape(shape))

    return ScalarField(func, ens.dim, horizon or ens.horizon, jet=jet, name="kde density")


def fokker_planck_residual_norm(rho, drift, kappa, t, pts):
    """Density-weighted norm of the Fokker-Planck residual of ``rho`` and of its largest term."""
    tt = np.full(len(pts), t)
    r = density_residual(DensityResidualKind.fokker_planck(kappa, drift), rho, tt, pts)
    jet = rho.jet(tt, pts)
    w = np.maximum(rho(tt, pts), 0.0)
    w = w / w.sum()
    norm = lambda a: float(np.sqrt(np.sum(w * a * a)))
    flux = np.sum(jet.grad * drift(tt, pts), -1) + rho(tt, pts) * drift.jet(tt, pts).div
    return norm(r), max(norm(jet.dt), norm(flux), norm(kappa * jet.lap))


def _temperature_ns(cfg, report, out_dir):
    th = cfg.thresholds
    flow = exact_flow(cfg.flow, cfg.T, **cfg.flow_kwargs())
    u = flow.velocity
    init = InitialLaw.from_dict(cfg.initial)
    fg = cfg.fp_grid
    mean, sd = np.asarray(init.mean), np.sqrt(np.asarray(init.cov))
    lo, hi = mean - 5 * sd - fg["margin"], mean + 5 * sd + fg["margin"]
    sol = solve_fokker_planck(u, cfg.kappa, init.density, lo, hi, fg["spacing"], cfg.probe_times,
                              cfl=fg["cfl"])
    c = np.asarray(cfg.probe["center"])
    box_lo, box_hi = c - cfg.probe["half_width"], c + cfg.probe["half_width"]
    sig = np.sqrt(2 * cfg.kappa)

    g = np.linspace(-2.0, 2.0, 21)
    fp_pts = c + np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)

    def fp_residuals(ens):
        rho = kde_density_field(ens, th["fp_bandwidth"])
        return {float(t): fokker_planck_residual_norm(rho, u, cfg.kappa, t, fp_pts)
                for t in cfg.probe_times}

    def l1_for(ens):
        out = {}
        for t in cfg.probe_times:
            dens = estimate_density(ens, t)
            smooth = ndimage.gaussian_filter(sol.densities[float(t)], dens.bandwidth / sol.spacing,
                                             mode="constant", truncate=6.0)
            out[float(t)] = kde_vs_reference_l1(dens, smooth, sol.axes, box_lo, box_hi)
        return out

    ens = simulate(DiffusionSpec(u, sig, init, cfg.T, name="temperature"), cfg.n_paths, cfg.dt,
                   cfg.seed, cfg.record_every, stream="simulation")
    _dump(cfg, out_dir, report, ens, "paths_temperature")
    l1 = l1_for(ens)
    for t, v in l1.items():
        report.add(Check(f"density vs Fokker-Planck grid solve, L1 at t={t:g}", v, th["l1"],
                         v <= th["l1"], detail={"fp_mass": sol.mass(t)}))
    res = fp_residuals(ens)
    for t, (r, sc) in res.items():
        report.add(Check(f"Fokker-Planck residual of the kernel density at t={t:g} (relative)",
                         r / sc, th["fp_rel"], r / sc <= th["fp_rel"], detail={"norm": r, "scale": sc}))
    del ens
    mag = cfg.negative_control["magnitude"]
    ctl = simulate(DiffusionSpec(u, sig * np.sqrt(mag), init, cfg.T), cfg.n_paths, cfg.dt,
                   cfg.seed, cfg.record_every, stream="controls")
    l1c = l1_for(ctl)
    res_c = fp_residuals(ctl)
    worst = max(r / sc for r, sc in res_c.values())
    base = max(r / sc for r, sc in res.values())
    report.add(Check(f"control (diffusivity x{mag:g}) Fokker-Planck residual (relative)", worst,
                     th["fp_rel"], worst > th["fp_rel"], "control", relation=">",
                     detail={"solution": base, "ratio": worst / base}))
    t_end = float(cfg.probe_times[-1])
    report.add(Check(f"control (diffusivity x{mag:g}) L1 at t={t_end:g}", l1c[t_end], th["l1"],
                     l1c[t_end] > th["l1"], "control", relation=">"))
    report.add(_ratio_check("control / solution L1", l1c[t_end], l1[t_end], th["control_ratio"]))


def _temperature_stokes(cfg, report):
    th = cfg.thresholds
    t = 0.5 * cfg.T
    B = brownian_bridge_ensemble(cfg.T, 1.0, cfg.n_paths, cfg.dt, cfg.seed, dim=2,
                                 record_every=cfg.record_every)
    W = reverse_ensemble(B)
    heat_kappa = cfg.kappa
    half = 6 * np.sqrt(2 * heat_kappa * t)
    axes = (np.linspace(-half, half, 121),) * 2
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def l1(scale2):
        Y = np.sqrt(scale2) * W.at(t)
        kde = GaussianKDE().fit(Y)
        var = 2 * heat_kappa * t + kde.bandwidth_**2
        ref = np.exp(-np.sum(mesh**2, -1) / (2 * var)) / (2 * np.pi * var)
        return kde_vs_reference_l1(kde.density, ref, axes, -half, half)

    base = l1(2 * heat_kappa)
    report.add(Check(f"heat-kernel density of sqrt(2 kappa) B_bar at t={t:g}, L1", base, th["l1"],
                     base <= th["l1"]))
    rho = gaussian_density([0.0, 0.0], 0.0, 2 * heat_kappa, cfg.T)
    x = mesh.reshape(-1, 2)[::97]
    res = density_residual(DensityResidualKind.heat(heat_kappa), rho, np.full(len(x), t), x)
    scale = float(np.max(np.abs(rho.jet(np.full(len(x), t), x).dt)))
    report.add(Check("heat kernel solves the heat equation (max residual / max d_t rho)",
                     float(np.max(np.abs(res))) / scale, 1e-9,
                     float(np.max(np.abs(res))) / scale <= 1e-9))
    mag = cfg.negative_control["magnitude"]
    c = l1(2 * heat_kappa * mag)
    report.add(Check(f"control (diffusivity x{mag:g}) L1 against the heat kernel", c, th["l1"],
                     c > th["l1"], "control", relation=">"))


def _temperature_euler(cfg, report):
    """Uniform density on the periodic cell transported by an incompressible flow."""
    th = cfg.thresholds
    flow = exact_flow("taylor_green", cfg.T, nu=0.0)
    u = flow.velocity
    two_pi = 2 * np.pi
    init = InitialLaw.uniform_box([0.0, 0.0], [two_pi, two_pi])
    n = max(2, cfg.n_paths // 2)
    dt = 0.01
    bins = 8

    def l1(field, stream):
        ens = simulate(DiffusionSpec(field, 0.0, init, cfg.T, "Lambda0"), n, dt, cfg.seed,
                       record_every=1, stream=stream)
        x = np.mod(ens.at(cfg.T), two_pi)
        hist, _, _ = np.histogram2d(x[:, 0], x[:, 1], bins=bins, range=[[0, two_pi]] * 2)
        area = (two_pi / bins) ** 2
        return float(np.sum(np.abs(hist / (n * area) - 1 / two_pi**2)) * area)

    noise = float(np.sqrt(2 * bins**2 / (np.pi * n)))
    tol = max(th["l1"], 3 * noise)
    base = l1(u, "simulation")
    report.add(Check("uniform density stays uniform under the inviscid flow (L1)", base, tol,
                     base <= tol, detail={"noise_level": noise}))
    const = ScalarField(lambda t, x: np.full(x.shape[:-1], 1 / two_pi**2), 2, cfg.T)
    g = np.linspace(0, two_pi, 9)
    pts = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    res = density_residual(DensityResidualKind.continuity(u), const, np.full(len(pts), 0.5), pts)
    worst = float(np.max(np.abs(res)))
    report.add(Check("continuity residual of the uniform density", worst, 1e-9, worst <= 1e-9))
    comp = u + VectorField(lambda t, x: np.stack([0.5 * np.sin(x[..., 0]), np.zeros(x.shape[:-1])], -1),
                           2, cfg.T, period=two_pi, name="compressible")
    c = l1(comp, "controls")
    report.add(Check("control (compressible drift) L1", c, tol, c > tol, "control", relation=">"))


def scenario_temperature(cfg: ScenarioConfig, out_dir=None) -> ScenarioReport:
    """Density transport: Fokker-Planck, heat and continuity equations against path densities."""
    report = ScenarioReport("temperature", cfg.to_dict(), cfg.seed,
                            statement="path densities solve the associated temperature "
                                      "(Fokker-Planck / heat / continuity) equations")
    if cfg.kappa > 0:
        _temperature_ns(cfg, report, out_dir)
        _temperature_stokes(cfg, report)
    _temperature_euler(cfg, report)
    return report


RUNNERS = {
    "navier_stokes": scenario_navier_stokes,
    "obstruction": scenario_obstruction,
    "euler": scenario_euler,
    "stokes": scenario_stokes,
    "temperature": scenario_temperature,
}


def run_scenario(cfg: ScenarioConfig, out_dir=None) -> ScenarioReport:
    """Run ``cfg.scenario``, stamp the wall clock and write ``report.json`` when ``out_dir`` is set."""
    start = time.perf_counter()
    try:
        report = RUNNERS[cfg.scenario](cfg, out_dir)
    except SlabError as exc:
        if isinstance(exc, ConfigError):
            raise
        report = ScenarioReport(cfg.scenario, cfg.to_dict(), cfg.seed)
        report.add(Check("scenario", None, None, False, status="inconclusive",
                         detail={"error": f"{type(exc).__name__}: {exc}"}))
    report.wall_clock = round(time.perf_counter() - start, 3)
    if out_dir:
        report.write(out_dir)
    return report


def primary_ensemble(cfg: ScenarioConfig):
    """The main ensemble of a scenario with the Lagrangian and ``mu`` it is tested against.

    Used by the ad-hoc ``nelson`` and ``action`` commands.
    """
    init = InitialLaw.from_dict(cfg.initial)
    flow = exact_flow(cfg.flow, cfg.T, **cfg.flow_kwargs())
    u, p = flow.velocity, flow.pressure
    mu = 1 if cfg.mu is None else cfg.mu
    if cfg.scenario == "stokes":
        B = brownian_bridge_ensemble(cfg.T, 1.0, cfg.n_paths, cfg.dt, cfg.seed, dim=u.dim,
                                     record_every=cfg.record_every)
        return B, LagrangianSpec(p), mu
    if cfg.scenario == "euler":
        spec = DiffusionSpec(u, 0.0, init, cfg.T, "Lambda0")
        L = LagrangianSpec(p)
    elif cfg.scenario == "navier_stokes":
        spec = DiffusionSpec(time_reverse_field(u), cfg.sigma, init, cfg.T)
        L = LagrangianSpec(p, "plus_p_bar")
    else:
        sigma = cfg.sigma if cfg.scenario == "obstruction" else np.sqrt(2 * cfg.kappa)
        spec = DiffusionSpec(u, sigma, init, cfg.T)
        L = LagrangianSpec(p)
    ens = simulate(spec, cfg.n_paths, cfg.dt, cfg.seed, cfg.record_every, stream="simulation")
    return ens, L, mu
