"""Closed-form space-time fields, their differential jets and a small library of exact flows.

A field is a vectorised callable ``f(t, x)`` where ``x`` has shape ``(..., d)`` and
``t`` is a scalar or an array broadcastable to ``x.shape[:-1]``.  Fields may carry an
analytic jet (time derivative, spatial derivatives, Laplacian); when they do not, the
jet falls back to second-order centred finite differences.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .exceptions import ConfigError, DomainError

DEFAULT_STEP = 1e-3
_T_TOL = 1e-12


class ScalarJet(NamedTuple):
    dt: np.ndarray    # (...)
    grad: np.ndarray  # (..., d)
    lap: np.ndarray   # (...)


class VectorJet(NamedTuple):
    dt: np.ndarray    # (..., d)
    jac: np.ndarray   # (..., d, d), jac[..., i, j] = d_j u^i
    lap: np.ndarray   # (..., d)
    div: np.ndarray   # (...)


def _as_points(x, dim):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != dim:
        raise ValueError(f"expected points with trailing dimension {dim}, got shape {x.shape}")
    return x


class _Field:
    """Shared machinery for scalar and vector fields."""

    is_vector = False

    def __init__(self, func, dim, horizon=1.0, jet=None, period=None, name="",
                 divergence_free=False):
        if dim not in (1, 2, 3):
            raise ValueError("dim must be 1, 2 or 3")
        if horizon <= 0:
            raise ValueError("horizon must be positive")
        self._func = func
        self._jet = jet
        self.dim = int(dim)
        self.horizon = float(horizon)
        self.period = None if period is None else np.broadcast_to(
            np.asarray(period, dtype=float), (self.dim,)).copy()
        self.name = name
        self.divergence_free = bool(divergence_free)

    @property
    def has_jet(self):
        return self._jet is not None

    @property
    def domain_kind(self):
        return "free" if self.period is None else "periodic"

    def _prepare(self, t, x):
        x = _as_points(x, self.dim)
        t = np.asarray(t, dtype=float)
        if np.any(t < -_T_TOL) or np.any(t > self.horizon + _T_TOL) or not np.all(np.isfinite(t)):
            raise DomainError(f"time outside [0, {self.horizon}] for field {self.name!r}")
        t = np.broadcast_to(np.clip(t, 0.0, self.horizon), x.shape[:-1])
        if self.period is not None:
            x = np.mod(x, self.period)
        return t, x

    def __call__(self, t, x):
        t, x = self._prepare(t, x)
        return self._func(t, x)

    def jet(self, t, x, step=DEFAULT_STEP):
        """Analytic jet when available, finite differences otherwise."""
        if self._jet is None:
            return differential_jet(self, t, x, step)
        t, x = self._prepare(t, x)
        return self._jet(t, x)

    def _rebuild(self, func, jet, name, divergence_free=False):
        return type(self)(func, self.dim, self.horizon, jet=jet, period=self.period,
                          name=name, divergence_free=divergence_free)

    def _check_compatible(self, other):
        if type(other) is not type(self) or other.dim != self.dim:
            raise TypeError("fields must have the same kind and dimension")
        if abs(other.horizon - self.horizon) > _T_TOL:
            raise ValueError("fields must share a horizon")

    def __add__(self, other):
        self._check_compatible(other)
        f, g = self, other
        jet = None
        if f.has_jet and g.has_jet:
            def jet(t, x):
                a, b = f._jet(t, x), g._jet(t, x)
                return type(a)(*(p + q for p, q in zip(a, b)))
        period = None
        if f.period is not None and g.period is not None and np.allclose(f.period, g.period):
            period = f.period
        return type(self)(lambda t, x: f._func(t, x) + g._func(t, x), self.dim, self.horizon,
                          jet=jet, period=period, name=f"({f.name} + {g.name})",
                          divergence_free=f.divergence_free and g.divergence_free)

    def __mul__(self, c):
        c = float(c)
        f = self
        jet = None
        if f.has_jet:
            def jet(t, x):
                a = f._jet(t, x)
                return type(a)(*(c * p for p in a))
        return self._rebuild(lambda t, x: c * f._func(t, x), jet, f"{c:g}*{f.name}",
                             divergence_free=f.divergence_free)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other)

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r}, dim={self.dim}, T={self.horizon:g})"


class ScalarField(_Field):
    """Real-valued field ``p(t, x)`` (pressure, density, test functions)."""


class VectorField(_Field):
    """``R^d``-valued field ``u(t, x)`` (velocities, drifts)."""

    is_vector = True

    @classmethod
    def affine(cls, matrix, offset=None, horizon=1.0, name="affine"):
        """Time-independent field ``u(x) = A x + c`` with exact jets."""
        A = np.atleast_2d(np.asarray(matrix, dtype=float))
        d = A.shape[0]
        c = np.zeros(d) if offset is None else np.asarray(offset, dtype=float)

        def func(t, x):
            return x @ A.T + c

        def jet(t, x):
            shape = x.shape[:-1]
            return VectorJet(np.zeros(shape + (d,)), np.broadcast_to(A, shape + (d, d)).copy(),
                             np.zeros(shape + (d,)), np.full(shape, np.trace(A)))

        return cls(func, d, horizon, jet=jet, name=name,
                   divergence_free=abs(np.trace(A)) < 1e-15)

    @classmethod
    def constant(cls, value, horizon=1.0, name="constant"):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls.affine(np.zeros((value.size, value.size)), value, horizon, name)


def differential_jet(field, t, x, step=DEFAULT_STEP):
    """Second-order centred finite-difference jet of ``field`` at ``(t, x)``.

    Time derivatives switch to second-order one-sided stencils within ``step`` of
    the ends of ``[0, T]``.  Periodic fields wrap coordinates during evaluation.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    x = _as_points(x, field.dim)
    t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
    T = field.horizon
    f0 = field(t, x)

    lo = t - step < 0
    hi = (t + step > T) & ~lo
    mid = ~(lo | hi)
    e = _expand(mid, field)
    dt = np.zeros_like(f0)
    if np.any(mid):
        dt = dt + e * (field(np.where(mid, t + step, t), x) - field(np.where(mid, t - step, t), x)) / (2 * step)
    if np.any(lo):
        el = _expand(lo, field)
        f1 = field(np.where(lo, t + step, t), x)
        f2 = field(np.where(lo, t + 2 * step, t), x)
        dt = dt + el * (-3 * f0 + 4 * f1 - f2) / (2 * step)
    if np.any(hi):
        eh = _expand(hi, field)
        f1 = field(np.where(hi, t - step, t), x)
        f2 = field(np.where(hi, t - 2 * step, t), x)
        dt = dt + eh * (3 * f0 - 4 * f1 + f2) / (2 * step)

    d = field.dim
    grads, second = [], 0.0
    for j in range(d):
        shift = np.zeros(d)
        shift[j] = step
        fp, fm = field(t, x + shift), field(t, x - shift)
        grads.append((fp - fm) / (2 * step))
        second = second + (fp - 2 * f0 + fm) / step**2
    if field.is_vector:
        jac = np.stack(grads, axis=-1)
        return VectorJet(dt, jac, second, np.trace(jac, axis1=-2, axis2=-1))
    return ScalarJet(dt, np.stack(grads, axis=-1), second)


def _expand(mask, field):
    return mask[..., None] if field.is_vector else mask


def time_reverse_field(field, T=None, negate=True):
    """Time-reversed field ``-u(T - t, x)`` (``negate=True``) or ``p(T - t, x)``.

    Velocities and drifts use ``negate=True``; pressures and densities ``negate=False``.
    """
    T = field.horizon if T is None else float(T)
    if abs(T - field.horizon) > _T_TOL:
        raise ValueError("reversal horizon must match the field horizon")
    s = -1.0 if negate else 1.0
    f = field

    def func(t, x):
        return s * f._func(T - t, x)

    jet = None
    if f.has_jet:
        def jet(t, x):
            inner = f._jet(T - t, x)
            # d/dt of s*g(T - t) is -s*g'(T - t); spatial parts scale by s
            return type(inner)(-s * inner[0], *(s * a for a in inner[1:]))

    bar = "phi" if negate else "rev"
    return type(field)(func, field.dim, T, jet=jet, period=field.period,
                       name=f"{bar}({field.name})", divergence_free=field.divergence_free)


def advective_term(u, t, x, step=DEFAULT_STEP):
    """``((u . grad) u)(t, x) = (d_x u) u``."""
    jac = u.jet(t, x, step).jac
    return np.einsum("...ij,...j->...i", jac, u(t, x))


def gaussian_density(mean, var0, var_rate=0.0, horizon=1.0, name="gaussian"):
    """Isotropic normal density ``N(mean, (var0 + var_rate * t) I)`` with exact jets.

    ``var_rate = 2 * kappa`` gives the heat kernel of ``d_t rho = kappa * Lap rho``.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    d = mean.size
    if var0 <= 0 and var_rate <= 0:
        raise ValueError("density needs positive variance")

    def var(t):
        return var0 + var_rate * t

    def func(t, x):
        s = var(t)
        r2 = np.sum((x - mean) ** 2, axis=-1)
        return np.exp(-r2 / (2 * s)) / (2 * np.pi * s) ** (d / 2)

    def jet(t, x):
        s = var(t)
        z = x - mean
        r2 = np.sum(z**2, axis=-1)
        rho = np.exp(-r2 / (2 * s)) / (2 * np.pi * s) ** (d / 2)
        dt = rho * (-d / (2 * s) + r2 / (2 * s**2)) * var_rate
        grad = -rho[..., None] * z / s[..., None]
        lap = rho * (r2 / s**2 - d / s)
        return ScalarJet(dt, grad, lap)

    return ScalarField(func, d, horizon, jet=jet, name=name)


class ExactFlow(NamedTuple):
    name: str
    velocity: VectorField
    pressure: ScalarField
    viscosity: float
    satisfies: frozenset  # subset of {"navier_stokes", "euler", "stokes"}


def _taylor_green(nu, horizon):
    two_pi = 2 * np.pi

    def u(t, x):
        a = np.exp(-2 * nu * t)
        s1, c1 = np.sin(x[..., 0]), np.cos(x[..., 0])
        s2, c2 = np.sin(x[..., 1]), np.cos(x[..., 1])
        return np.stack([a * s1 * c2, -a * c1 * s2], axis=-1)

    def u_jet(t, x):
        a = np.exp(-2 * nu * t)
        s1, c1 = np.sin(x[..., 0]), np.cos(x[..., 0])
        s2, c2 = np.sin(x[..., 1]), np.cos(x[..., 1])
        vel = np.stack([a * s1 * c2, -a * c1 * s2], axis=-1)
        jac = np.empty(x.shape[:-1] + (2, 2))
        jac[..., 0, 0] = a * c1 * c2
        jac[..., 0, 1] = -a * s1 * s2
        jac[..., 1, 0] = a * s1 * s2
        jac[..., 1, 1] = -a * c1 * c2
        return VectorJet(-2 * nu * vel, jac, -2 * vel, np.zeros(x.shape[:-1]))

    def p(t, x):
        return np.exp(-4 * nu * t) * (np.cos(2 * x[..., 0]) + np.cos(2 * x[..., 1])) / 4

    def p_jet(t, x):
        b = np.exp(-4 * nu * t)
        c = np.cos(2 * x[..., 0]) + np.cos(2 * x[..., 1])
        grad = np.stack([-b * np.sin(2 * x[..., 0]), -b * np.sin(2 * x[..., 1])], axis=-1) / 2
        return ScalarJet(-nu * b * c, grad, -b * c)

    tags = {"navier_stokes"} if nu > 0 else {"navier_stokes", "euler"}
    return ExactFlow(
        "taylor_green",
        VectorField(u, 2, horizon, jet=u_jet, period=two_pi, name=f"taylor_green(nu={nu:g})",
                    divergence_free=True),
        ScalarField(p, 2, horizon, jet=p_jet, period=two_pi, name="p_taylor_green"),
        float(nu), frozenset(tags))


def _rigid_rotation(omega, horizon):
    vel = VectorField.affine([[0.0, -omega], [omega, 0.0]], horizon=horizon,
                             name=f"rigid_rotation(omega={omega:g})")

    def p(t, x):
        return 0.5 * omega**2 * np.sum(x**2, axis=-1)

    def p_jet(t, x):
        shape = x.shape[:-1]
        return ScalarJet(np.zeros(shape), omega**2 * x, np.full(shape, 2 * omega**2))

    return ExactFlow("rigid_rotation", vel,
                     ScalarField(p, 2, horizon, jet=p_jet, name="p_rigid_rotation"),
                     0.0, frozenset({"euler"}))


def _shear_mode(nu, horizon):
    def u(t, x):
        a = np.exp(-nu * t) * np.sin(x[..., 1])
        return np.stack([a, np.zeros_like(a)], axis=-1)

    def u_jet(t, x):
        e = np.exp(-nu * t)
        s2, c2 = np.sin(x[..., 1]), np.cos(x[..., 1])
        vel = np.stack([e * s2, np.zeros_like(s2)], axis=-1)
        jac = np.zeros(x.shape[:-1] + (2, 2))
        jac[..., 0, 1] = e * c2
        return VectorJet(-nu * vel, jac, -vel, np.zeros(x.shape[:-1]))

    return ExactFlow("shear_mode",
                     VectorField(u, 2, horizon, jet=u_jet, period=2 * np.pi,
                                 name=f"shear_mode(nu={nu:g})", divergence_free=True),
                     zero_scalar(2, horizon), float(nu),
                     frozenset({"stokes", "navier_stokes"} | ({"euler"} if nu == 0 else set())))


def _uniform(c, horizon):
    c = np.atleast_1d(np.asarray(c, dtype=float))
    return ExactFlow("uniform", VectorField.constant(c, horizon, name=f"uniform({c.tolist()})"),
                     zero_scalar(c.size, horizon), 0.0,
                     frozenset({"navier_stokes", "euler", "stokes"}))


def zero_scalar(dim, horizon=1.0):
    def jet(t, x):
        shape = x.shape[:-1]
        return ScalarJet(np.zeros(shape), np.zeros(shape + (dim,)), np.zeros(shape))

    return ScalarField(lambda t, x: np.zeros(x.shape[:-1]), dim, horizon, jet=jet, name="0")


FLOWS = {
    "taylor_green": (_taylor_green, {"nu": 0.05}),
    "rigid_rotation": (_rigid_rotation, {"omega": 1.0}),
    "shear_mode": (_shear_mode, {"nu": 0.1}),
    "uniform": (_uniform, {"c": [1.0, 0.0]}),
}


def exact_flow(name, horizon=1.0, **params) -> ExactFlow:
    """Build one of the closed-form flows in :data:`FLOWS`.

    >>> flow = exact_flow("taylor_green", nu=0.05)
    >>> flow.velocity(0.0, [np.pi / 2, 0.0]).round(12).tolist()
    [1.0, -0.0]
    """
    try:
        builder, defaults = FLOWS[name]
    except KeyError:
        raise ConfigError(f"unknown flow {name!r}; choose from {sorted(FLOWS)}") from None
    unknown = set(params) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown parameters for {name}: {sorted(unknown)}")
    merged = {**defaults, **params}
    if merged.get("nu", 0.0) < 0:
        raise ConfigError("viscosity must be non-negative")
    return builder(*(merged[k] for k in defaults), horizon)


def describe_flows():
    """One line per library flow: name, default parameters, tagged equations."""
    lines = []
    for name, (_, defaults) in FLOWS.items():
        tags = sorted(exact_flow(name, **defaults).satisfies)
        lines.append(f"{name:15s} {defaults}  satisfies: {', '.join(tags)}")
    return lines

