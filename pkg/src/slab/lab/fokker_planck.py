"""Finite-difference Fokker-Planck solver used as an independent oracle for path densities.

Solves ``d_t rho = -div(rho b) + kappa Lap rho`` on a uniform box grid with second-order
central differences and Heun (explicit RK2) time stepping.  The box is periodic when the
drift is, otherwise mass leaving the box is lost (absorbing far field).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..exceptions import EstimationError


class CFLViolation(EstimationError):
    """The requested step is outside the explicit scheme's stability region."""


@dataclass
class FPSolution:
    axes: tuple
    times: np.ndarray
    densities: dict  # time -> grid array

    @property
    def spacing(self):
        return np.array([ax[1] - ax[0] for ax in self.axes])

    def points(self):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    def mass(self, t):
        return float(self.densities[t].sum() * np.prod(self.spacing))


def _deriv(f, axis, dx, periodic):
    if periodic:
        return (np.roll(f, -1, axis) - np.roll(f, 1, axis)) / (2 * dx)
    g = np.pad(f, [(1, 1) if a == axis else (0, 0) for a in range(f.ndim)])
    sl_p = [slice(None)] * f.ndim
    sl_m = [slice(None)] * f.ndim
    sl_p[axis], sl_m[axis] = slice(2, None), slice(None, -2)
    return (g[tuple(sl_p)] - g[tuple(sl_m)]) / (2 * dx)


def _second(f, axis, dx, periodic):
    if periodic:
        return (np.roll(f, -1, axis) - 2 * f + np.roll(f, 1, axis)) / dx**2
    g = np.pad(f, [(1, 1) if a == axis else (0, 0) for a in range(f.ndim)])
    sl_p = [slice(None)] * f.ndim
    sl_m = [slice(None)] * f.ndim
    sl_p[axis], sl_m[axis] = slice(2, None), slice(None, -2)
    return (g[tuple(sl_p)] - 2 * f + g[tuple(sl_m)]) / dx**2


def solve_fokker_planck(drift, kappa, rho0, lo, hi, spacing, times, cfl=0.4, dt=None,
                        periodic=False):
    """Evolve the density ``rho0`` (callable on ``(..., d)`` points) to each of ``times``.

    The step is the largest one allowed by ``cfl`` unless ``dt`` is given, in which case a
    step outside the stability region raises :class:`CFLViolation`.  The central scheme
    also needs cell Peclet numbers ``|b| dx / (2 kappa)`` below one.
    """
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    d = lo.size
    n = np.maximum(np.round((hi - lo) / spacing).astype(int), 2)
    if periodic:
        axes = tuple(lo[j] + (hi[j] - lo[j]) * np.arange(n[j]) / n[j] for j in range(d))
    else:
        axes = tuple(np.linspace(lo[j], hi[j], n[j] + 1) for j in range(d))
    dx = np.array([ax[1] - ax[0] for ax in axes])
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    rho = np.asarray(rho0(mesh), dtype=float)

    times = np.sort(np.asarray(times, dtype=float))
    probe = np.linspace(0.0, times[-1], 11)
    bmax = max(float(np.max(np.abs(drift(t, mesh)))) for t in probe)
    if kappa > 0 and bmax * dx.max() / (2 * kappa) >= 1.0:
        raise CFLViolation("cell Peclet number >= 1; refine the grid")
    limit = np.inf
    if kappa > 0:
        limit = min(limit, 1.0 / (2 * kappa * np.sum(1.0 / dx**2)))
    if bmax > 0:
        limit = min(limit, 1.0 / (bmax * np.sum(1.0 / dx)))
    if dt is None:
        dt = cfl * limit
    elif dt > limit:
        raise CFLViolation(f"dt={dt:g} exceeds the stability limit {limit:g}")

    def rhs(t, f):
        b = drift(t, mesh)
        out = kappa * sum(_second(f, j, dx[j], periodic) for j in range(d)) if kappa > 0 else 0.0
        return out - sum(_deriv(f * b[..., j], j, dx[j], periodic) for j in range(d))

    out, t = {}, 0.0
    for target in times:
        steps = int(np.ceil((target - t) / dt - 1e-12))
        h = (target - t) / steps if steps else 0.0
        for _ in range(steps):
            k1 = rhs(t, rho)
            k2 = rhs(t + h, rho + h * k1)
            rho = rho + 0.5 * h * (k1 + k2)
            t += h
        t = target
        out[float(target)] = rho.copy()
    return FPSolution(axes, times, out)
