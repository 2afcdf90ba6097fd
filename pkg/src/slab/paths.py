"""Diffusion specifications and Monte Carlo path ensembles.

Randomness is drawn per fixed-size block of paths from a counter-based generator keyed by
``(seed, stream, block)``, so an ensemble is bit-identical whatever the number of worker
threads used to build it.
"""
from __future__ import annotations

import csv
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .exceptions import ConfigError, SimulationDivergedError
from .fields import VectorField, time_reverse_field

BLOCK = 8192
CLASS_TAGS = ("LambdaC", "Lambda0", "LambdaB")


def stream_id(name):
    return zlib.crc32(name.encode())


def block_rng(seed, stream, block):
    """Generator for one block of paths of one named stream."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(stream_id(stream), int(block)))
    return np.random.Generator(np.random.Philox(ss))


def n_workers(workers=None):
    if workers is not None:
        return max(1, int(workers))
    try:
        return max(1, int(os.environ.get("SLAB_WORKERS", "1")))
    except ValueError:
        raise ConfigError("SLAB_WORKERS must be an integer") from None


def _blocks(n):
    return [(b, b * BLOCK, min(n, (b + 1) * BLOCK)) for b in range((n + BLOCK - 1) // BLOCK)]


@dataclass(frozen=True)
class InitialLaw:
    kind: str
    mean: Optional[tuple] = None
    cov: Optional[tuple] = None
    lo: Optional[tuple] = None
    hi: Optional[tuple] = None
    x0: Optional[tuple] = None
    must_have_density: bool = False

    def __post_init__(self):
        if self.kind == "gaussian":
            if self.mean is None or self.cov is None or len(self.mean) != len(self.cov):
                raise ConfigError("gaussian law needs mean and diagonal cov of equal length")
            if min(self.cov) <= 0:
                raise ConfigError("gaussian covariance entries must be positive")
        elif self.kind == "uniform_box":
            if self.lo is None or self.hi is None or len(self.lo) != len(self.hi):
                raise ConfigError("uniform_box law needs lo and hi of equal length")
            if any(a >= b for a, b in zip(self.lo, self.hi)):
                raise ConfigError("uniform_box needs lo < hi componentwise")
        elif self.kind == "point":
            if self.x0 is None:
                raise ConfigError("point law needs x0")
            if self.must_have_density:
                raise ConfigError("a point initial law has no density")
        else:
            raise ConfigError(f"unknown initial law {self.kind!r}")

    @classmethod
    def gaussian(cls, mean, cov, must_have_density=False):
        mean = tuple(float(v) for v in np.atleast_1d(mean))
        cov = tuple(float(v) for v in np.broadcast_to(np.atleast_1d(cov), (len(mean),)))
        return cls("gaussian", mean=mean, cov=cov, must_have_density=must_have_density)

    @classmethod
    def uniform_box(cls, lo, hi, must_have_density=False):
        return cls("uniform_box", lo=tuple(map(float, lo)), hi=tuple(map(float, hi)),
                   must_have_density=must_have_density)

    @classmethod
    def point(cls, x0):
        return cls("point", x0=tuple(float(v) for v in np.atleast_1d(x0)))

    @property
    def dim(self):
        return len(self.mean or self.lo or self.x0)

    def sample(self, rng, n):
        d = self.dim
        if self.kind == "gaussian":
            return np.asarray(self.mean) + np.sqrt(np.asarray(self.cov)) * rng.standard_normal((n, d))
        if self.kind == "uniform_box":
            lo, hi = np.asarray(self.lo), np.asarray(self.hi)
            return lo + (hi - lo) * rng.random((n, d))
        return np.broadcast_to(np.asarray(self.x0), (n, d)).copy()

    def density(self, x):
        """Density of the law at points ``x`` (``(..., d)``)."""
        x = np.asarray(x, dtype=float)
        if self.kind == "gaussian":
            m, v = np.asarray(self.mean), np.asarray(self.cov)
            z = np.sum((x - m) ** 2 / v, axis=-1)
            return np.exp(-z / 2) / np.sqrt(np.prod(2 * np.pi * v))
        if self.kind == "uniform_box":
            lo, hi = np.asarray(self.lo), np.asarray(self.hi)
            inside = np.all((x >= lo) & (x <= hi), axis=-1)
            return inside / np.prod(hi - lo)
        raise ConfigError("a point initial law has no density")

    def to_dict(self):
        keys = {"gaussian": ("mean", "cov"), "uniform_box": ("lo", "hi"), "point": ("x0",)}[self.kind]
        return {"kind": self.kind, **{k: list(getattr(self, k)) for k in keys}}

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        kind = data.pop("kind", None)
        builders = {"gaussian": cls.gaussian, "uniform_box": cls.uniform_box, "point": cls.point}
        if kind not in builders:
            raise ConfigError(f"unknown initial law {kind!r}")
        try:
            return builders[kind](**data)
        except TypeError as exc:
            raise ConfigError(f"bad initial law parameters: {exc}") from None


@dataclass(frozen=True)
class DiffusionSpec:
    """``dX = b(t, X) dt + sigma dW`` on ``[0, horizon]`` with ``X_0`` drawn from ``initial``."""

    drift: VectorField
    sigma: float
    initial: InitialLaw
    horizon: float = 1.0
    class_tag: str = "LambdaC"
    name: str = ""

    def __post_init__(self):
        if self.horizon <= 0:
            raise ConfigError("horizon must be positive")
        if self.class_tag not in CLASS_TAGS:
            raise ConfigError(f"class_tag must be one of {CLASS_TAGS}")
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")
        if self.class_tag == "LambdaC" and self.sigma == 0:
            raise ConfigError("LambdaC diffusions need sigma > 0")
        if self.class_tag == "Lambda0" and self.sigma != 0:
            raise ConfigError("Lambda0 processes have sigma = 0")
        if self.initial.dim != self.drift.dim:
            raise ConfigError("initial law and drift dimensions differ")
        if abs(self.drift.horizon - self.horizon) > 1e-12:
            raise ConfigError("drift horizon differs from the diffusion horizon")


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """``n_paths`` sampled paths recorded on a uniform grid ``times``.

    ``drift`` is whichever Nelson derivative is known in closed form: the forward drift for
    a simulated diffusion, the backward one for a time-reversed ensemble.
    """

    states: np.ndarray
    times: np.ndarray
    dt: float
    seed: int
    sigma: float
    drift: Optional[VectorField] = None
    drift_direction: str = "forward"
    label: str = ""
    spec: Optional[DiffusionSpec] = None
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self):
        return self.states.shape[0]

    @property
    def dim(self):
        return self.states.shape[2]

    @property
    def horizon(self):
        return float(self.times[-1])

    @property
    def dt_record(self):
        return float(self.times[1] - self.times[0])

    def index_of(self, t):
        k = int(round(t / self.dt_record))
        if k < 0 or k >= len(self.times) or abs(self.times[k] - t) > 1e-9:
            raise ValueError(f"t={t} is not on the recorded grid (step {self.dt_record:g})")
        return k

    def lag_steps(self, h):
        m = int(round(h / self.dt_record))
        if m < 1 or abs(m * self.dt_record - h) > 1e-9 * max(1.0, h):
            raise ValueError(f"lag h={h} is not a positive multiple of the record step {self.dt_record:g}")
        return m

    def at(self, t):
        return self.states[:, self.index_of(t)]

    def to_csv(self, path, max_paths=None):
        """Write ``path,k,t,x1..xd`` rows with 17 significant digits."""
        n = self.n_paths if max_paths is None else min(self.n_paths, max_paths)
        K, d = len(self.times), self.dim
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "k", "t"] + [f"x{j + 1}" for j in range(d)])
            for i in range(n):
                for k in range(K):
                    w.writerow([i, k, f"{self.times[k]:.17g}"]
                               + [f"{v:.17g}" for v in self.states[i, k]])
        return path


def read_csv(path):
    """Inverse of :meth:`PathEnsemble.to_csv`: returns ``(times, states)``."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n, K = int(data[:, 0].max()) + 1, int(data[:, 1].max()) + 1
    states = data[:, 3:].reshape(n, K, -1)
    return data[:K, 2].copy(), states


def _grid(horizon, dt, record_every):
    M = int(round(horizon / dt))
    if M < 1 or abs(M * dt - horizon) > 1e-12:
        raise ConfigError(f"dt={dt} does not divide the horizon {horizon}")
    if record_every < 1 or M % record_every:
        raise ConfigError("record_every must divide the number of steps")
    return M, np.arange(M // record_every + 1) * (dt * record_every)


def simulate(spec, n_paths, dt, seed, record_every=1, stream="simulation", scheme=None,
             noise_refinement=1, workers=None) -> PathEnsemble:
    """Euler-Maruyama paths of ``spec`` (classical RK4 for ``sigma = 0`` unless told otherwise).

    ``noise_refinement = r`` builds each Brownian increment from ``r`` finer increments, so
    runs at ``(dt, r)`` and ``(dt / 2, r / 2)`` share the same Brownian path.
    """
    if n_paths < 1:
        raise ConfigError("n_paths must be at least 1")
    if spec.class_tag == "LambdaB":
        raise ConfigError("LambdaB processes are built with drift_integral_ensemble")
    scheme = scheme or ("rk4" if spec.sigma == 0 else "euler_maruyama")
    if scheme not in ("euler_maruyama", "rk4"):
        raise ConfigError(f"unknown scheme {scheme!r}")
    if scheme == "rk4" and spec.sigma != 0:
        raise ConfigError("rk4 is only available for sigma = 0")
    M, times = _grid(spec.horizon, dt, record_every)
    d, b, sig = spec.drift.dim, spec.drift, spec.sigma
    out = np.empty((n_paths, len(times), d))
    r = int(noise_refinement)

    def run(block):
        idx, lo, hi = block
        rng = block_rng(seed, stream, idx)
        x = spec.initial.sample(rng, hi - lo)
        out[lo:hi, 0] = x
        for k in range(M):
            t = k * dt
            if scheme == "rk4":
                k1 = b(t, x)
                k2 = b(t + dt / 2, x + dt / 2 * k1)
                k3 = b(t + dt / 2, x + dt / 2 * k2)
                k4 = b(t + dt, x + dt * k3)
                x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            else:
                x = x + b(t, x) * dt
                if sig > 0:
                    xi = rng.standard_normal((hi - lo, d))
                    for _ in range(r - 1):
                        xi += rng.standard_normal((hi - lo, d))
                    x += sig * np.sqrt(dt / r) * xi
            if (k + 1) % record_every == 0:
                if not np.all(np.isfinite(x)):
                    raise SimulationDivergedError(k + 1)
                out[lo:hi, (k + 1) // record_every] = x

    blocks = _blocks(n_paths)
    with ThreadPoolExecutor(min(n_workers(workers), len(blocks))) as pool:
        for fut in [pool.submit(run, blk) for blk in blocks]:
            fut.result()
    out.flags.writeable = False
    return PathEnsemble(out, times, float(dt), int(seed), float(sig), drift=b,
                        drift_direction="forward", label=spec.name or b.name, spec=spec,
                        meta={"scheme": scheme, "record_every": record_every, "stream": stream})


def reverse_ensemble(ens) -> PathEnsemble:
    """Pathwise time reversal ``X_{T-t}``; the known drift becomes ``phi`` of the old one."""
    drift = None if ens.drift is None else time_reverse_field(ens.drift, ens.horizon, negate=True)
    direction = {"forward": "backward", "backward": "forward"}[ens.drift_direction]
    label = ens.label[9:-1] if ens.label.startswith("reversed(") else f"reversed({ens.label})"
    meta = dict(ens.meta, reversed=not ens.meta.get("reversed", False))
    states = ens.states[:, ::-1]
    return replace(ens, states=states, drift=drift, drift_direction=direction, label=label, meta=meta)


def brownian_bridge_ensemble(T, sigma_b, n_paths, dt, seed, dim=2, record_every=1, workers=None):
    """Bridge pinned to 0 at ``T``, built as the reversal of a Brownian motion started at 0.

    ``B_T = 0`` exactly, ``B_0 ~ N(0, sigma_b^2 T)``, the backward drift is 0 and the
    forward drift is ``-x / (T - t)``.
    """
    zero = VectorField.constant(np.zeros(dim), horizon=T, name="0")
    spec = DiffusionSpec(zero, float(sigma_b), InitialLaw.point(np.zeros(dim)), T,
                         "LambdaC", name="W")
    w = simulate(spec, n_paths, dt, seed, record_every=record_every, stream="bridge",
                 workers=workers)
    bridge = reverse_ensemble(w)
    return replace(bridge, label="bridge", meta=dict(bridge.meta, bridge=True))


def bridge_forward_drift(T, dim=2):
    """Forward drift ``-x / (T - t)`` of a bridge pinned to 0 at ``T`` (undefined at ``t = T``)."""
    def func(t, x):
        return -x / (T - t)[..., None]

    return VectorField(func, dim, T, name="bridge_forward_drift")


def drift_integral_ensemble(u, sigma_b, bridge, initial, seed, stream="initial", workers=None):
    """``X_t = X_0 + int_0^t u(s, sigma_b B_s) ds`` by a left Riemann sum on the bridge grid."""
    if u.dim != bridge.dim or initial.dim != bridge.dim:
        raise ValueError("field, bridge and initial law dimensions differ")
    if abs(u.horizon - bridge.horizon) > 1e-12:
        raise ValueError("field horizon does not match the bridge grid")
    n, K, d = bridge.states.shape
    h = bridge.dt_record
    out = np.empty((n, K, d))

    def run(block):
        idx, lo, hi = block
        x = initial.sample(block_rng(seed, stream, idx), hi - lo)
        out[lo:hi, 0] = x
        for k in range(K - 1):
            x = x + u(bridge.times[k], sigma_b * bridge.states[lo:hi, k]) * h
            out[lo:hi, k + 1] = x

    blocks = _blocks(n)
    with ThreadPoolExecutor(min(n_workers(workers), len(blocks))) as pool:
        for fut in [pool.submit(run, blk) for blk in blocks]:
            fut.result()
    out.flags.writeable = False
    return PathEnsemble(out, bridge.times, bridge.dt, int(seed), 0.0, drift=None,
                        label=f"drift_integral({u.name})",
                        meta={"driver": bridge, "sigma_b": float(sigma_b), "velocity": u})


__all__ = [
    "InitialLaw", "DiffusionSpec", "PathEnsemble", "simulate", "reverse_ensemble",
    "brownian_bridge_ensemble", "bridge_forward_drift", "drift_integral_ensemble", "read_csv",
    "block_rng",
]
