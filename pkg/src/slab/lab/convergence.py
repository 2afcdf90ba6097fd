"""Three-level bias studies: halve ``dt`` and the difference lag ``h`` together and check the
estimation error shrinks.

``trend_check`` accepts a sequence of errors as decreasing when every step goes down up to
``k`` noise units and the last level is below the first by more than that.
"""
from __future__ import annotations

import numpy as np

from ..action import LagrangianSpec, el_residual
from ..fields import VectorField, exact_flow, time_reverse_field
from ..nelson import NelsonParams, estimate_drift
from ..paths import DiffusionSpec, InitialLaw, simulate
from .config import ScenarioConfig
from .scenarios import probe_points

OU_LEVELS = ((4e-3, 0.4), (2e-3, 0.2), (1e-3, 0.1))
NS_LEVELS = ((4e-3, 0.08), (2e-3, 0.04), (1e-3, 0.02))
OU_GRID = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])


def trend_check(errors, noise, k=2.0):
    errors, noise = np.asarray(errors, float), np.asarray(noise, float)
    steps = [bool(errors[i + 1] <= errors[i] + k * np.hypot(noise[i], noise[i + 1]))
             for i in range(len(errors) - 1)]
    overall = bool(errors[-1] < errors[0] - k * np.hypot(noise[0], noise[-1]))
    return {"errors": errors.tolist(), "noise": noise.tolist(), "steps": steps,
            "overall": overall, "passed": all(steps) and overall}


def ou_backward_drift_error(dt, h, n_paths=200_000, seed=0, bandwidth=0.1, t=0.5,
                            theta=1.0, sigma=1.0):
    """Grid RMS error of the backward-drift estimate of stationary OU against ``b_*(x) = theta x``.

    Returns ``(error, noise)`` where ``noise`` is the RMS standard error over the grid
    divided by the square root of the number of grid points.
    """
    drift = VectorField.affine([[-theta]], name="ou")
    init = InitialLaw.gaussian([0.0], [sigma**2 / (2 * theta)])
    ens = simulate(DiffusionSpec(drift, sigma, init, 1.0, name="ou"), n_paths, dt, seed,
                   stream="simulation")
    params = NelsonParams(h=h, bandwidth=bandwidth, t_buffer=h)
    est = estimate_drift(ens, t, OU_GRID[:, None], params, "backward")
    err = est.values[:, 0] - theta * OU_GRID
    return (float(np.sqrt(np.mean(err**2))),
            float(np.sqrt(np.mean(est.stderr[:, 0] ** 2)) / np.sqrt(len(OU_GRID))))


def ns_sel_residual(cfg: ScenarioConfig, dt, h):
    """Regression SEL residual norm of the reversed-drift Navier-Stokes ensemble at ``(dt, h)``.

    The record stride is chosen so every level shares the default record grid.
    """
    step = cfg.dt * cfg.record_every
    record = max(1, int(round(step / dt)))
    flow = exact_flow(cfg.flow, cfg.T, **cfg.flow_kwargs())
    spec = DiffusionSpec(time_reverse_field(flow.velocity), cfg.sigma,
                         InitialLaw.from_dict(cfg.initial), cfg.T)
    ens = simulate(spec, cfg.n_paths, dt, cfg.seed, record, stream="simulation")
    params = NelsonParams.default(ens, **{**cfg.nelson, "h": h})
    res = el_residual(ens, LagrangianSpec(flow.pressure, "plus_p_bar"), 1, "SEL", params,
                      cfg.probe_times, probe_points(cfg), route="empirical")
    ok = np.all(np.isfinite(res.values), axis=-1)
    noise = float(np.sqrt(np.mean(np.sum(res.stderr[ok] ** 2, axis=-1)) / ok.sum()))
    return res.norm, noise


def ou_convergence(levels=OU_LEVELS, **kw):
    out = [ou_backward_drift_error(dt, h, **kw) for dt, h in levels]
    return {"levels": [list(l) for l in levels], **trend_check(*zip(*out))}


def ns_convergence(cfg, levels=NS_LEVELS):
    out = [ns_sel_residual(cfg, dt, h) for dt, h in levels]
    return {"levels": [list(l) for l in levels], **trend_check(*zip(*out))}
