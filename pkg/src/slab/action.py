"""Stochastic action functionals, their first variations and Euler-Lagrange residuals.

Only the natural Lagrangian ``L(t, x, v) = |v|^2 / 2 - V(t, x)`` is modelled, with the
potential ``V`` either a pressure ``p`` or the reversed pressure ``p(T - t, x)``.
Time integrals use Simpson weights on the recorded grid restricted to the window
``[a, b] = [t_buffer, T - t_buffer]``, outside of which backward quotients and bridge drifts
are singular.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import simpson

from .exceptions import EstimationError, XiViolationError
from .fields import ScalarField, time_reverse_field
from .nelson import (NelsonParams, estimate_density, known_velocity, mu_weights,
                     regress_quotient, velocity_at_samples)
from .paths import _blocks, block_rng, simulate

SIGNS = ("minus_p", "plus_p_bar")
FORMS = ("SEL", "GSEL")
VERDICTS = ("critical", "not-critical", "inconclusive")
_TOL = 1e-9


class LagrangianSpec:
    """Natural Lagrangian ``|v|^2 / 2 - p`` (``minus_p``) or ``|v|^2 / 2 + p_bar`` (``plus_p_bar``).

    ``p_bar = -p(T - t, x)`` is the pressure under the same reversal that maps ``u`` to
    ``u_bar = -u(T - t, x)``, so both forms are ``|v|^2 / 2 - V`` with ``V = p`` or
    ``V = p(T - t, x)``.
    """

    def __init__(self, pressure: ScalarField, sign="minus_p"):
        if sign not in SIGNS:
            raise ValueError(f"sign must be one of {SIGNS}")
        self.pressure = pressure
        self.sign = sign
        self.potential = pressure if sign == "minus_p" else time_reverse_field(pressure, negate=False)

    @property
    def horizon(self):
        return self.pressure.horizon

    def value(self, t, x, v):
        return 0.5 * np.sum(v * v, axis=-1) - self.potential(t, x)

    def d_x(self, t, x):
        """``dL/dx = -grad V``."""
        return -self.potential.jet(t, x).grad

    @staticmethod
    def d_v(v):
        return v

    def scale(self, t_grid, states):
        """Root-mean-square of ``grad V`` over the given times and samples."""
        acc = [np.mean(np.sum(self.d_x(t, x) ** 2, axis=-1)) for t, x in zip(t_grid, states)]
        return float(np.sqrt(np.mean(acc)))

    def __repr__(self):
        return f"LagrangianSpec({self.pressure.name!r}, {self.sign})"


@dataclass(frozen=True)
class VariationSpec:
    """A variation ``Z`` with ``Z(a) = Z(b) = 0`` on the window ``[a, b]``.

    ``n1_bump``: ``Z_t = eps g_m(t) e`` with ``g_m(t) = sin(m pi (t - a) / (b - a))``,
    deterministic, so ``D Z = D_* Z = eps g_m'(t) e``.  ``lambda1_bridge``: ``Z_t = eps beta_t e``
    with ``beta`` a standard Brownian bridge from 0 at ``a`` to 0 at ``b``, independent of
    the ensemble, whose forward and backward drifts are ``-Z / (b - t)`` and ``Z / (t - a)``.
    """

    family: str
    direction: tuple
    eps: float = 0.1
    mode: int = 1
    index: int = 0

    def __post_init__(self):
        if self.family not in ("n1_bump", "lambda1_bridge"):
            raise ValueError(f"unknown variation family {self.family!r}")
        e = np.asarray(self.direction, dtype=float)
        if not np.isclose(np.linalg.norm(e), 1.0):
            raise ValueError("direction must be a unit vector")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        if self.family == "n1_bump" and self.mode < 1:
            raise ValueError("bump mode must be a positive integer")

    @classmethod
    def bump(cls, mode, direction, eps=0.1):
        return cls("n1_bump", tuple(map(float, direction)), float(eps), int(mode))

    @classmethod
    def bridge(cls, direction, eps=0.1, index=0):
        return cls("lambda1_bridge", tuple(map(float, direction)), float(eps), index=int(index))

    @property
    def deterministic(self):
        return self.family == "n1_bump"

    def profile(self, t, a, b):
        """``(g(t), g'(t))`` of a bump (zero outside ``[a, b]``)."""
        t = np.asarray(t, dtype=float)
        inside = (t >= a - _TOL) & (t <= b + _TOL)
        k = self.mode * np.pi / (b - a)
        g = np.where(inside, np.sin(k * (t - a)), 0.0)
        dg = np.where(inside, k * np.cos(k * (t - a)), 0.0)
        return g, dg

    def describe(self):
        if self.family == "n1_bump":
            return f"bump(m={self.mode}, e={list(self.direction)}, eps={self.eps:g})"
        return f"bridge(#{self.index}, e={list(self.direction)}, eps={self.eps:g})"


def default_bumps(dim, eps=0.1, modes=(1, 2, 3, 4)):
    """Bump profiles ``m = 1..4`` crossed with the coordinate directions."""
    return [VariationSpec.bump(m, np.eye(dim)[j], eps) for m in modes for j in range(dim)]


def default_bridges(dim, eps=0.1, count=4):
    return [VariationSpec.bridge(np.eye(dim)[i % dim], eps, index=i) for i in range(count)]


def simpson_weights(times):
    """Quadrature weights ``w`` with ``sum(w * f) = simpson(f, x=times)``."""
    times = np.asarray(times, dtype=float)
    return simpson(np.eye(len(times)), x=times, axis=1)


def integration_window(ens, params):
    """Record indices covering ``[t_buffer, T - t_buffer]``."""
    a, b = params.t_buffer, ens.horizon - params.t_buffer
    if b - a <= _TOL:
        raise ValueError("t_buffer leaves an empty integration window")
    ka, kb = ens.index_of(a), ens.index_of(b)
    return np.arange(ka, kb + 1)


class _Integrand:
    """Per-slice state, velocity and ``dL/dx`` shared by all functionals.

    ``state(k)`` and ``velocity(k)`` override the defaults (the ensemble's samples and its
    ``D_mu`` velocity), which is how the bridge-driven functionals evaluate ``L`` at a
    process different from the one being varied.
    """

    def __init__(self, ens, L, mu, params, state=None, velocity=None, bandwidth=None):
        if abs(L.horizon - ens.horizon) > _TOL:
            raise ValueError("Lagrangian and ensemble have different horizons")
        self.ens, self.L, self.mu, self.params = ens, L, mu, params
        self.idx = integration_window(ens, params)
        self.times = ens.times[self.idx]
        self.weights = simpson_weights(self.times)
        self._state, self._velocity, self.bandwidth = state, velocity, bandwidth

    def slice(self, k):
        ens, t = self.ens, self.ens.times[k]
        x = ens.states[:, k] if self._state is None else self._state(k)
        if self._velocity is not None:
            v, ok = self._velocity(k), None
        else:
            _, v, ok = velocity_at_samples(ens, t, self.mu, bandwidth=self.bandwidth)
        dx = self.L.d_x(np.full(len(x), t), x)
        if ok is not None and not ok.all():
            # samples outside the density estimate's support carry no velocity estimate
            v = np.where(ok[:, None], v, np.nan)
        return t, x, v, dx


def action_value(ens, L, mu, params, state=None, velocity=None, bandwidth=None):
    """``E int_a^b L(t, X_t, D_mu X_t) dt`` and its Monte Carlo standard error."""
    it = _Integrand(ens, L, mu, params, state, velocity, bandwidth)
    total = np.zeros(ens.n_paths)
    for w, k in zip(it.weights, it.idx):
        t, x, v, _ = it.slice(k)
        total += w * L.value(np.full(len(x), t), x, v)
    if not np.all(np.isfinite(total)):
        raise XiViolationError("action integrand is not finite on some paths")
    return float(total.mean()), float(total.std(ddof=1) / np.sqrt(len(total)))


class _BridgeSampler:
    """Exact sequential sampling of independent scalar bridges pinned at ``a`` and ``b``."""

    def __init__(self, n, seed, index, times):
        self.blocks = _blocks(n)
        self.rngs = [block_rng(seed, f"variations/{index}", blk) for blk, _, _ in self.blocks]
        self.times = times
        self.value = np.zeros(n)
        self.k = 0

    def advance(self):
        t0, t1, b = self.times[self.k], self.times[self.k + 1], self.times[-1]
        rem0, rem1 = b - t0, b - t1
        mean = self.value * (rem1 / rem0)
        sd = np.sqrt(max((t1 - t0) * rem1 / rem0, 0.0))
        noise = np.concatenate([rng.standard_normal(hi - lo)
                                for rng, (_, lo, hi) in zip(self.rngs, self.blocks)])
        self.value = mean + sd * noise
        self.k += 1


def _variation_slices(variations, it, n, seed):
    """Yield per slice the scalar coefficients ``(z, dz)`` with ``Z_t = z e``, ``D_mu Z_t = dz e``."""
    times = it.times
    a, b = times[0], times[-1]
    ca, cb = mu_weights(it.mu)
    samplers = {i: _BridgeSampler(n, seed, Z.index, times)
                for i, Z in enumerate(variations) if Z.family == "lambda1_bridge"}
    for j, t in enumerate(times):
        out = []
        for i, Z in enumerate(variations):
            if Z.family == "n1_bump":
                g, dg = Z.profile(t, a, b)
                out.append((Z.eps * float(g), Z.eps * float(dg)))
                continue
            s = samplers[i]
            while s.k < j:
                s.advance()
            beta = s.value
            if 0 < j < len(times) - 1:
                dbeta = ca * (-beta / (b - t)) + cb * (beta / (t - a))
            else:
                dbeta = np.zeros_like(beta)  # pinned endpoints; the drift is 0/0 there
            out.append((Z.eps * beta, Z.eps * dbeta))
        yield out


def first_variations(ens, L, variations: Sequence[VariationSpec], mu, params, seed=None,
                     state=None, velocity=None, bandwidth=None):
    """Weak-form first variations ``dF(X, Z) = E int [dL/dx . Z + dL/dv . D_mu Z] dt``.

    All variations share one pass over the time slices.  Returns one dict per variation
    with ``dF``, ``stderr`` and ``norm_Z = E int |Z| dt``.
    """
    it = _Integrand(ens, L, mu, params, state, velocity, bandwidth)
    n = ens.n_paths
    seed = ens.seed if seed is None else seed
    E = np.array([Z.direction for Z in variations]).T  # (d, q)
    dF = np.zeros((len(variations), n))
    normZ = np.zeros((len(variations), n))
    for w, k, zs in zip(it.weights, it.idx, _variation_slices(variations, it, n, seed)):
        t, x, v, dx = it.slice(k)
        dxe, ve = dx @ E, v @ E
        for i, (z, dz) in enumerate(zs):
            dF[i] += w * (z * dxe[:, i] + dz * ve[:, i])
            normZ[i] += w * np.abs(z)
    if not np.all(np.isfinite(dF)):
        raise XiViolationError("first-variation integrand is not finite on some paths")
    out = []
    for i, Z in enumerate(variations):
        se = float(dF[i].std(ddof=1) / np.sqrt(n))
        out.append({"variation": Z.describe(), "family": Z.family, "eps": Z.eps,
                    "dF": float(dF[i].mean()), "stderr": se, "norm_Z": float(normZ[i].mean())})
    return out


def first_variation(ens, L, Z: VariationSpec, mu, params, **kw):
    r = first_variations(ens, L, [Z], mu, params, **kw)[0]
    return r["dF"], r["stderr"]


def finite_difference_variation(source, L, Z: VariationSpec, mu, eps_list, params,
                                n_paths=None, dt=None, seed=0, record_every=1, bandwidth=None):
    """Slope of ``eps -> F(X + eps Z)`` at 0 from the same noise realisations.

    ``source`` is a :class:`~slab.paths.DiffusionSpec` (simulated here) or a ready ensemble.
    Shifting by a deterministic ``Z`` moves every Nelson derivative by ``eps Z'``, so
    ``F(X + eps Z)`` is evaluated on the shifted states with shifted velocities.  The
    per-path quotients ``(F_eps - F_0) / eps`` are fitted linearly in ``eps`` and the
    intercept is returned with its standard error.
    """
    if not Z.deterministic:
        raise ValueError("finite differences need a deterministic variation")
    eps_list = np.asarray(eps_list, dtype=float)
    if eps_list.size < 1 or np.any(eps_list == 0):
        raise ValueError("eps_list must hold non-zero amplitudes")
    ens = source
    if not hasattr(source, "states"):
        ens = simulate(source, n_paths, dt, seed, record_every=record_every)
    it = _Integrand(ens, L, mu, params, bandwidth=bandwidth)
    a, b = it.times[0], it.times[-1]
    e = np.asarray(Z.direction)
    base = np.zeros(ens.n_paths)
    shifted = np.zeros((len(eps_list), ens.n_paths))
    for w, k in zip(it.weights, it.idx):
        t, x, v, _ = it.slice(k)
        g, dg = Z.profile(t, a, b)
        tt = np.full(len(x), t)
        base += w * L.value(tt, x, v)
        for j, s in enumerate(eps_list):
            s = s * Z.eps
            shifted[j] += w * L.value(tt, x + s * float(g) * e, v + s * float(dg) * e)
    quot = (shifted - base) / eps_list[:, None]
    if len(eps_list) == 1:
        slope = quot[0]
    else:
        A = np.vstack([np.ones_like(eps_list), eps_list]).T
        coef = np.linalg.lstsq(A, quot, rcond=None)[0]
        slope = coef[0]
    if not np.all(np.isfinite(slope)):
        raise XiViolationError("shifted action is not finite on some paths")
    return float(slope.mean()), float(slope.std(ddof=1) / np.sqrt(len(slope)))


@dataclass(frozen=True, eq=False)
class ResidualEstimate:
    """Euler-Lagrange residual ``D_nu[dL/dv] - dL/dx`` with ``nu = mu`` (SEL) or ``-mu`` (GSEL)."""

    form: str
    mu: float
    route: str
    t_grid: np.ndarray
    points: Optional[np.ndarray]
    values: Optional[np.ndarray]
    stderr: Optional[np.ndarray]
    n_eff: Optional[np.ndarray]
    norm: float
    norm_raw: float
    scale: float
    meta: dict = field(default_factory=dict)

    @property
    def relative(self):
        return self.norm / self.scale if self.scale > 0 else np.inf


def _inner_field(ens, mu):
    v = known_velocity(ens, mu)
    if v is None:
        raise EstimationError("the inner derivative D_mu X must be the ensemble's known drift "
                              "(or the ensemble deterministic)")
    return v


def el_residual(ens, L, mu, form, params, t_grid, points=None, route="chain", bandwidth=None):
    """Strong-form Euler-Lagrange residual of ``ens`` for the Lagrangian ``L``.

    ``route="chain"`` evaluates the outer derivative through the chain rule on the known
    inner field (``d_t v + D_nu X . grad v + (nu / 2) sigma^2 Lap v``), with a kernel estimate
    of ``grad log rho`` wherever ``D_nu X`` is not the known drift; the norm is the ensemble
    ``L^2`` norm over the samples and ``t_grid``.  ``route="empirical"`` regresses the
    difference quotients of ``v(t, X_t)`` (minus ``dL/dx``) on ``X_t`` at ``points``; its norm
    is density-weighted over the grid with the squared standard errors subtracted.
    """
    if form not in FORMS:
        raise ValueError(f"form must be one of {FORMS}")
    nu = mu if form == "SEL" else -mu
    v = _inner_field(ens, mu)
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=float))
    scale = L.scale(t_grid, [ens.at(t) for t in t_grid])
    if route == "chain":
        acc, cnt = 0.0, 0
        vals = []
        for t in t_grid:
            X, w, ok = velocity_at_samples(ens, t, nu, bandwidth=bandwidth)
            tt = np.full(len(X), t)
            jet = v.jet(tt, X)
            r = (jet.dt + np.einsum("nij,nj->ni", jet.jac, w)
                 + 0.5 * nu * ens.sigma**2 * jet.lap - L.d_x(tt, X))
            r = r[ok]
            acc += np.sum(r * r)
            cnt += len(r)
            if points is not None:
                vals.append(_chain_at_points(ens, v, L, nu, t, points, bandwidth))
        norm = float(np.sqrt(acc / cnt))
        values = None if points is None else np.stack(vals)
        return ResidualEstimate(form, mu, route, t_grid, None if points is None else np.asarray(points),
                                values, None, None, norm, norm, scale)
    if route != "empirical":
        raise ValueError("route must be 'chain' or 'empirical'")
    if points is None:
        raise ValueError("the empirical route needs probe points")
    a, c = mu_weights(nu)
    values, ses, neffs = [], [], []

    def offset(s, x):
        return L.d_x(np.full(len(x), s), x)

    for t in t_grid:
        val, se, n_eff = 0.0, 0.0, None
        for wgt, direction in ((a, "forward"), (c, "backward")):
            if wgt == 0:
                continue
            est = regress_quotient(ens, t, points, params, direction, f=v, offset=offset)
            val = val + wgt * est.values
            se = se + wgt * est.stderr
            n_eff = est.n_eff if n_eff is None else np.minimum(n_eff, est.n_eff)
        values.append(val)
        ses.append(se)
        neffs.append(n_eff)
    values, ses, neffs = np.stack(values), np.stack(ses), np.stack(neffs)
    norm, raw = weighted_norm(values, ses, neffs)
    return ResidualEstimate(form, mu, route, t_grid, np.asarray(points, dtype=float), values, ses,
                            neffs, norm, raw, scale)


def weighted_norm(values, stderr, weights):
    """Weighted RMS of vector estimates, raw and with the noise floor ``sum se^2`` removed."""
    ok = np.all(np.isfinite(values), axis=-1)
    w = np.where(ok, weights, 0.0)
    if w.sum() <= 0:
        raise EstimationError("no valid grid point to form a norm")
    sq = np.sum(np.where(ok[..., None], values, 0.0) ** 2, axis=-1)
    noise = np.sum(np.where(ok[..., None], stderr, 0.0) ** 2, axis=-1)
    raw = float(np.sum(w * sq) / w.sum())
    deb = float(np.sum(w * (sq - noise)) / w.sum())
    return float(np.sqrt(max(deb, 0.0))), float(np.sqrt(raw))


def _chain_at_points(ens, v, L, nu, t, points, bandwidth):
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    tt = np.full(len(pts), t)
    w = ens.drift(tt, pts)
    a, c = mu_weights(nu)
    corr = -c if ens.drift_direction == "forward" else a
    if ens.sigma > 0 and corr != 0:
        w = w + corr * ens.sigma**2 * estimate_density(ens, t, bandwidth).grad_log(pts)
    jet = v.jet(tt, pts)
    return (jet.dt + np.einsum("nij,nj->ni", jet.jac, w) + 0.5 * nu * ens.sigma**2 * jet.lap
            - L.d_x(tt, pts))


@dataclass(frozen=True)
class Thresholds:
    """``|dF| <= max(n_se * stderr, rel * ||Z|| * scale)`` counts as zero."""

    rel: float = 0.02
    n_se: float = 3.0
    fail_factor: float = 3.0


@dataclass
class ActionReport:
    F: float
    F_stderr: float
    variations: list
    residual_norms: dict
    verdict: str
    thresholds: dict
    statement: str = ""
    seed: Optional[int] = None
    config_hash: str = ""

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(_jsonable(self.to_dict()), sort_keys=True, indent=2)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def verdict_from(results, thresholds: Thresholds, scale):
    """Annotate ``results`` with thresholds and return the overall verdict."""
    for r in results:
        thr = max(thresholds.n_se * r["stderr"], thresholds.rel * r["norm_Z"] * scale)
        r["threshold"] = thr
        r["zero"] = bool(abs(r["dF"]) <= thr)
        r["nonzero"] = bool(abs(r["dF"]) >= thresholds.fail_factor * thr and abs(r["dF"]) > 0
                           and r["eps"] > 0)
    if all(r["eps"] == 0 for r in results):
        return "inconclusive"
    if any(r["nonzero"] for r in results):
        return "not-critical"
    if all(r["zero"] for r in results):
        return "critical"
    return "inconclusive"


def criticality_test(ens, L, variations, mu, params, thresholds=Thresholds(), scale=None,
                     statement="", residuals=None, min_variations=8, **kw) -> ActionReport:
    """Run every variation and classify the ensemble as critical, not critical or inconclusive.

    ``scale`` defaults to the RMS of ``grad V`` over the integration window; pass 1.0 for
    purely relative thresholds.
    """
    if len(variations) < min_variations:
        raise ValueError(f"need at least {min_variations} variations, got {len(variations)}")
    results = first_variations(ens, L, variations, mu, params, **kw)
    if scale is None:
        idx = integration_window(ens, params)
        sub = idx[:: max(1, len(idx) // 20)]
        state = kw.get("state")
        scale = L.scale(ens.times[sub], [ens.states[:, k] if state is None else state(k) for k in sub])
    verdict = verdict_from(results, thresholds, scale)
    F, F_se = action_value(ens, L, mu, params, kw.get("state"), kw.get("velocity"), kw.get("bandwidth"))
    return ActionReport(F, F_se, results, dict(residuals or {}), verdict,
                        {**asdict(thresholds), "scale": scale}, statement, ens.seed)


def config_hash(config: dict) -> str:
    blob = json.dumps(_jsonable(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


__all__ = [
    "LagrangianSpec", "VariationSpec", "ActionReport", "ResidualEstimate", "Thresholds",
    "action_value", "first_variation", "first_variations", "finite_difference_variation",
    "el_residual", "criticality_test", "default_bumps", "default_bridges", "simpson_weights",
    "weighted_norm", "verdict_from", "config_hash",
]
