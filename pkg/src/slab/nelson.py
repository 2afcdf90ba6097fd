"""Forward and backward (Nelson) derivatives of sampled diffusions.

The forward derivative of a Markov diffusion at time ``t`` is the conditional mean of
``(X_{t+h} - X_t) / h`` given ``X_t`` as ``h -> 0``, the backward one that of
``(X_t - X_{t-h}) / h``.  Both are estimated by kernel regression of the difference
quotients on ``X_t``.  For a constant diffusion coefficient ``sigma`` the two are linked
by ``b_* = b - sigma^2 grad log rho_t``, which gives a closed-form route whenever one drift
is known and the density can be estimated.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .estimators import GaussianKDE, NadarayaWatsonRegressor
from .exceptions import DomainError, EstimationError
from .fields import ScalarField, VectorField
from .paths import reverse_ensemble

DIRECTIONS = ("forward", "backward")
_TOL = 1e-9


def mu_weights(mu):
    """Weights ``(a, c)`` with ``D_mu = a D + c D_*``."""
    return (1.0 + mu) / 2.0, (1.0 - mu) / 2.0


@dataclass(frozen=True)
class NelsonParams:
    """Tuning of the difference-quotient estimators.

    Parameters
    ----------
    h : float
        Quotient lag, a multiple of the ensemble's record step.
    bandwidth : float
        Gaussian kernel width of the regression on ``X_t``.
    t_buffer : float
        Estimation times must lie in ``[t_buffer, T - t_buffer]``.
    mu : float
        Selects ``D_mu``; +1 forward, -1 backward, 0 the current velocity.
    n_min : float
        Minimum effective sample count for a grid point to be reported.
    pool : float
        Half-width of a time window whose non-overlapping quotients (spacing ``h``) are
        pooled into one regression.  Zero disables pooling.
    richardson : bool
        Replace an estimate at lag ``h`` by ``2 est(h) - est(2h)``.
    """

    h: float
    bandwidth: float = 0.2
    t_buffer: float = 0.05
    mu: float = 1.0
    n_min: float = 20.0
    pool: float = 0.0
    richardson: bool = False

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("h must be positive")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if self.t_buffer < self.h - _TOL:
            raise ValueError("t_buffer must be at least h")
        if self.pool < 0:
            raise ValueError("pool must be non-negative")

    @classmethod
    def default(cls, ens, **overrides):
        """``h = 4 dt`` and ``t_buffer = max(8 dt, 0.05 T)``, snapped to the record grid."""
        step = ens.dt_record
        h = step * max(1, int(np.ceil(4 * ens.dt / step - _TOL)))
        buf = max(8 * ens.dt, 0.05 * ens.horizon, h)
        buf = step * int(np.ceil(buf / step - _TOL))
        return cls(**{"h": h, "t_buffer": buf, **overrides})

    def check(self, ens, t=None):
        if self.h < ens.dt - _TOL:
            raise ValueError("h must be at least the simulation step")
        ens.lag_steps(self.h)
        if t is not None:
            lag = 2 * self.h if self.richardson else self.h
            lo, hi = max(self.t_buffer, lag), ens.horizon - max(self.t_buffer, lag)
            if t < lo - _TOL or t > hi + _TOL:
                raise DomainError(f"t={t} outside the estimation window [{lo:g}, {hi:g}]")


@dataclass(frozen=True, eq=False)
class DriftEstimate:
    """Vector estimates on a grid of points; ``valid`` marks points with enough samples."""

    t: float
    points: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    n_eff: np.ndarray
    direction: str
    label: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def valid(self):
        return np.all(np.isfinite(self.values), axis=-1)

    def to_csv(self, path):
        d = self.points.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{j + 1}" for j in range(d)] + [f"v{j + 1}" for j in range(d)]
                       + [f"stderr{j + 1}" for j in range(d)] + ["n_eff"])
            for x, v, s, n in zip(self.points, self.values, self.stderr, self.n_eff):
                w.writerow([f"{self.t:.17g}"] + [f"{a:.17g}" for a in (*x, *v, *s, n)])
        return path


@dataclass(frozen=True, eq=False)
class DensityEstimate:
    """Kernel density of the ensemble at one time."""

    t: float
    bandwidth: float
    kde: GaussianKDE

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.kde.density(x.reshape(-1, x.shape[-1])).reshape(x.shape[:-1])

    def grad_log(self, x):
        x = np.asarray(x, dtype=float)
        return self.kde.grad_log(x.reshape(-1, x.shape[-1])).reshape(x.shape)

    def total_mass(self):
        """Integral of the estimate over its (covering) evaluation grid."""
        k = self.kde
        if k.method == "binned":
            return float(k.density_grid_.sum() * np.prod(k.grid_dx_))
        return 1.0


def _points(points, dim):
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != dim:
        raise ValueError(f"points must have {dim} columns")
    return pts


def _start_indices(ens, t, params):
    """Record indices of the quotient anchors pooled around ``t``."""
    k0 = ens.index_of(t)
    m = ens.lag_steps(params.h)
    if params.pool <= 0:
        return [k0], m
    lo = max(params.t_buffer, params.h)
    hi = ens.horizon - lo
    j = int(np.floor(params.pool / params.h + _TOL))
    ks = [k0 + i * m for i in range(-j, j + 1)]
    ks = [k for k in ks if 0 <= k < len(ens.times) and lo - _TOL <= ens.times[k] <= hi + _TOL]
    return ks, m


def quotient_samples(ens, t, params, direction, f=None, offset=None, lag=None):
    """Stack ``(X_s, q_s)`` over the pooled anchors ``s`` around ``t``.

    ``q_s = (f(s + h, X_{s+h}) - f(s, X_s)) / h`` forward or
    ``(f(s, X_s) - f(s - h, X_{s-h})) / h`` backward, with ``f`` the identity by default.
    ``offset(s, X_s)`` is subtracted from each quotient when given.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    p = params if lag is None else replace(params, h=lag, t_buffer=max(params.t_buffer, lag))
    ks, m = _start_indices(ens, t, p)
    xs, qs = [], []
    for k in ks:
        k2 = k + m if direction == "forward" else k - m
        if k2 < 0 or k2 >= len(ens.times):
            raise DomainError(f"quotient at t={ens.times[k]:g} leaves [0, T]")
        s, s2 = ens.times[k], ens.times[k2]
        x, x2 = ens.states[:, k], ens.states[:, k2]
        fa = x if f is None else f(s, x)
        fb = x2 if f is None else f(s2, x2)
        q = (fb - fa) / p.h if direction == "forward" else (fa - fb) / p.h
        if offset is not None:
            q = q - offset(s, x)
        xs.append(x)
        qs.append(q)
    return np.concatenate(xs), np.concatenate(qs)


def _regress(X, q, points, params):
    nw = NadarayaWatsonRegressor(params.bandwidth, params.n_min).fit(X, q)
    mean, se, n_eff = nw.predict_full(points)
    if mean.ndim == 1:
        mean, se = mean[:, None], se[:, None]
    return mean, se, n_eff


def regress_quotient(ens, t, points, params, direction, f=None, offset=None, label=""):
    """Kernel regression of difference quotients of ``f(t, X_t)`` on ``X_t``."""
    params.check(ens, t)
    pts = _points(points, ens.dim)
    X, q = quotient_samples(ens, t, params, direction, f, offset)
    mean, se, n_eff = _regress(X, q, pts, params)
    if params.richardson:
        X2, q2 = quotient_samples(ens, t, params, direction, f, offset, lag=2 * params.h)
        mean2, se2, n2 = _regress(X2, q2, pts, params)
        mean = 2 * mean - mean2
        se = np.sqrt(4 * se**2 + se2**2)
        n_eff = np.minimum(n_eff, n2)
    return DriftEstimate(float(t), pts, mean, se, n_eff, direction, label,
                         meta={"h": params.h, "bandwidth": params.bandwidth, "pool": params.pool,
                               "n_samples": len(X)})


def estimate_drift(ens, t, points, params, direction="forward") -> DriftEstimate:
    """Forward or backward drift of ``ens`` at time ``t`` on ``points``.

    Points whose kernel neighbourhood holds fewer than ``params.n_min`` effective samples
    are reported as NaN.
    """
    return regress_quotient(ens, t, points, params, direction, label=f"{direction} drift")


def closed_form_backward_drift(b: VectorField, sigma, rho: ScalarField) -> VectorField:
    """``b_* = b - sigma^2 grad log rho`` for a diffusion with constant coefficient ``sigma``.

    >>> import numpy as np
    >>> from slab.fields import gaussian_density
    >>> ou = VectorField.affine([[-1.0]], name="ou")
    >>> bstar = closed_form_backward_drift(ou, 1.0, gaussian_density([0.0], 0.5))
    >>> float(bstar(0.3, np.array([0.8]))[0])
    0.8
    """
    if sigma == 0:
        return b
    s2 = float(sigma) ** 2

    def func(t, x):
        r = rho(t, x)
        bad = ~(r > 0)
        if np.any(bad):
            where = np.asarray(x)[bad][0].tolist()
            raise DomainError(f"density vanishes at x={where}; backward drift undefined")
        return b(t, x) - s2 * rho.jet(t, x).grad / r[..., None]

    return VectorField(func, b.dim, b.horizon, period=b.period,
                       name=f"backward({b.name}, sigma={sigma:g})")


def estimate_density(ens, t, bandwidth=None, method="binned") -> DensityEstimate:
    """Gaussian kernel density of ``X_t`` (Silverman bandwidth unless given)."""
    X = ens.at(t)
    kde = GaussianKDE(bandwidth="silverman" if bandwidth is None else bandwidth, method=method)
    kde.fit(X)
    return DensityEstimate(float(t), kde.bandwidth_, kde)


def d_mu_combine(fwd, bwd, mu):
    """``(fwd + bwd) / 2 + mu (fwd - bwd) / 2`` for estimates, fields or arrays."""
    a, c = mu_weights(mu)
    if isinstance(fwd, DriftEstimate) and isinstance(bwd, DriftEstimate):
        if fwd.points.shape != bwd.points.shape or not np.array_equal(fwd.points, bwd.points) \
                or abs(fwd.t - bwd.t) > _TOL:
            raise ValueError("estimates live on different grids or times")
        values = _lin(a, fwd.values, c, bwd.values)
        # both come from the same sample, so add standard errors rather than variances
        stderr = _lin(abs(a), fwd.stderr, abs(c), bwd.stderr)
        return DriftEstimate(fwd.t, fwd.points, values, stderr, np.minimum(fwd.n_eff, bwd.n_eff),
                             "forward" if mu == 1 else "backward" if mu == -1 else f"mu={mu:g}",
                             label=f"D_mu(mu={mu:g})")
    if isinstance(fwd, VectorField) and isinstance(bwd, VectorField):
        if fwd.dim != bwd.dim or abs(fwd.horizon - bwd.horizon) > _TOL:
            raise ValueError("fields have different domains")
        if c == 0:
            return fwd
        if a == 0:
            return bwd
        return fwd * a + bwd * c
    if isinstance(fwd, (DriftEstimate, VectorField)) or isinstance(bwd, (DriftEstimate, VectorField)):
        raise TypeError("fwd and bwd must be of the same kind")
    fwd, bwd = np.asarray(fwd, dtype=float), np.asarray(bwd, dtype=float)
    if fwd.shape != bwd.shape:
        raise ValueError("arrays have different shapes")
    return _lin(a, fwd, c, bwd)


def _lin(a, x, c, y):
    if c == 0:
        return np.array(x, dtype=float, copy=True)
    if a == 0:
        return np.array(y, dtype=float, copy=True)
    return a * x + c * y


def velocity_at_samples(ens, t, mu, density: Optional[DensityEstimate] = None, bandwidth=None):
    """``D_mu X_t`` at every sample of ``ens`` using its known drift.

    The other Nelson derivative follows from ``b_* = b - sigma^2 grad log rho`` with a kernel
    estimate of ``grad log rho``.  Returns ``(X_t, v, ok)``; ``ok`` is False where the density
    estimate vanishes.
    """
    if ens.drift is None:
        raise EstimationError("ensemble carries no known drift field")
    X = ens.at(t)
    v = ens.drift(t, X)
    ok = np.ones(len(X), dtype=bool)
    a, c = mu_weights(mu)
    # weight of the osmotic correction sigma^2 grad log rho
    w = -c if ens.drift_direction == "forward" else a
    if ens.sigma > 0 and w != 0:
        if density is None:
            density = estimate_density(ens, t, bandwidth)
        g = density.grad_log(X)
        ok = np.all(np.isfinite(g), axis=-1)
        v = v + w * ens.sigma**2 * np.where(ok[:, None], g, 0.0)
    return X, v, ok


def known_velocity(ens, mu):
    """``D_mu X`` as a field when it is the ensemble's known drift, else ``None``."""
    a, c = mu_weights(mu)
    if ens.drift is None:
        return None
    if ens.sigma == 0:
        return ens.drift
    if (ens.drift_direction == "forward" and c == 0) or (ens.drift_direction == "backward" and a == 0):
        return ens.drift
    return None


def chain_rule_check(f: ScalarField, ens, params, t, points):
    """Empirical ``D_mu f(t, X_t)`` against ``d_t f + D_mu X . grad f + (mu/2) sigma^2 Lap f``.

    Returns a dict with ``lhs``, ``rhs``, ``gap``, ``stderr`` per grid point, ``max_gap`` and
    ``passed`` (every valid gap within three combined standard errors).
    """
    if not f.has_jet:
        raise ValueError("chain_rule_check needs a field with an analytic jet")
    pts = _points(points, ens.dim)
    a, c = mu_weights(params.mu)
    lhs, se_l = 0.0, 0.0
    drift, se_d = 0.0, 0.0
    for w, direction in ((a, "forward"), (c, "backward")):
        if w == 0:
            continue
        q = regress_quotient(ens, t, pts, params, direction, f=f)
        d = estimate_drift(ens, t, pts, params, direction)
        lhs = lhs + w * q.values[:, 0]
        se_l = se_l + w * q.stderr[:, 0]
        drift = drift + w * d.values
        se_d = se_d + w * d.stderr
    jet = f.jet(np.full(len(pts), t), pts)
    rhs = jet.dt + np.sum(drift * jet.grad, axis=-1) + 0.5 * params.mu * ens.sigma**2 * jet.lap
    stderr = np.sqrt(se_l**2 + np.sum((se_d * jet.grad) ** 2, axis=-1))
    gap = lhs - rhs
    ok = np.isfinite(gap)
    return {
        "t": float(t), "points": pts, "lhs": lhs, "rhs": rhs, "gap": gap, "stderr": stderr,
        "lhs_stderr": se_l, "max_gap": float(np.max(np.abs(gap[ok]))) if ok.any() else np.nan,
        "passed": bool(ok.any() and np.all(np.abs(gap[ok]) <= 3 * stderr[ok])),
    }


def product_rule_check(ens_x, ens_y, mu, t_grid, params, bandwidth=None):
    """``E[D_mu X . Y + X . D_{-mu} Y]`` against the centred difference of ``E[X . Y]``.

    Both ensembles must share the time grid and path count; the product is taken path by
    path, so coupled ensembles (the same paths) and independent ones are both allowed.
    """
    if ens_x.states.shape != ens_y.states.shape or not np.allclose(ens_x.times, ens_y.times):
        raise ValueError("ensembles have incompatible grids")
    m = ens_x.lag_steps(params.h)
    rows = []
    n = ens_x.n_paths
    for t in np.atleast_1d(t_grid):
        params.check(ens_x, t)
        X, vx, okx = velocity_at_samples(ens_x, t, mu, bandwidth=bandwidth)
        Y, vy, oky = velocity_at_samples(ens_y, t, -mu, bandwidth=bandwidth)
        ok = okx & oky
        integrand = np.sum(vx * Y + X * vy, axis=-1)[ok]
        k = ens_x.index_of(t)
        prod_hi = np.sum(ens_x.states[:, k + m] * ens_y.states[:, k + m], axis=-1)
        prod_lo = np.sum(ens_x.states[:, k - m] * ens_y.states[:, k - m], axis=-1)
        diff = (prod_hi - prod_lo) / (2 * params.h)
        lhs, rhs = float(integrand.mean()), float(diff.mean())
        se = float(np.hypot(integrand.std(ddof=1) / np.sqrt(ok.sum()), diff.std(ddof=1) / np.sqrt(n)))
        rows.append({"t": float(t), "lhs": lhs, "rhs": rhs, "gap": lhs - rhs, "stderr": se,
                     "lhs_stderr": float(integrand.std(ddof=1) / np.sqrt(ok.sum())),
                     "rhs_stderr": float(diff.std(ddof=1) / np.sqrt(n))})
    gaps = [abs(r["gap"]) for r in rows]
    return {"rows": rows, "max_gap": max(gaps),
            "passed": all(abs(r["gap"]) <= 3 * r["stderr"] for r in rows)}


def reversal_identity_check(ens, params, t, points, oracle=None):
    """Forward drift of the reversed ensemble against ``phi`` of the backward drift.

    ``phi(b_*)(t, x) = -b_*(T - t, x)``.  The two estimates share their samples, so their gap
    only measures the bookkeeping of the reversal; ``oracle`` (a field giving the reversed
    process's forward drift in closed form) adds an independent comparison.
    """
    if ens.sigma <= 0:
        raise ValueError("reversal identity check needs sigma > 0")
    rev = reverse_ensemble(ens)
    T = ens.horizon
    fwd_rev = estimate_drift(rev, t, points, params, "forward")
    bwd = estimate_drift(ens, T - t, points, params, "backward")
    gap = fwd_rev.values + bwd.values
    se = np.hypot(fwd_rev.stderr, bwd.stderr)
    ok = fwd_rev.valid & bwd.valid
    out = {
        "t": float(t), "points": fwd_rev.points, "forward_reversed": fwd_rev.values,
        "phi_backward": -bwd.values, "gap": gap, "stderr": se,
        "max_gap": float(np.max(np.abs(gap[ok]))),
        "passed": bool(np.all(np.abs(gap[ok]) <= 3 * se[ok])),
    }
    if oracle is not None:
        ref = oracle(np.full(len(fwd_rev.points), t), fwd_rev.points)
        ogap = fwd_rev.values - ref
        out.update(oracle=ref, oracle_gap=ogap,
                   oracle_max_gap=float(np.max(np.abs(ogap[ok]))),
                   oracle_passed=bool(np.all(np.abs(ogap[ok]) <= 3 * fwd_rev.stderr[ok])))
        out["passed"] = out["passed"] and out["oracle_passed"]
    return out


__all__ = [
    "NelsonParams", "DriftEstimate", "DensityEstimate", "estimate_drift", "regress_quotient",
    "closed_form_backward_drift", "estimate_density", "d_mu_combine", "velocity_at_samples",
    "known_velocity", "chain_rule_check", "product_rule_check", "reversal_identity_check",
    "quotient_samples", "mu_weights",
]
