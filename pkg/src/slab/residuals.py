"""Pointwise residuals of the momentum and density equations.

Every residual is "left-hand side minus right-hand side" of the equation as usually
written, so a zero vector means the equation holds at the query point.  Residuals are
strong-form and pointwise; callers compute ensemble or grid norms.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .fields import DEFAULT_STEP, VectorField

MOMENTUM_TAGS = ("navier_stokes", "euler", "stokes", "mixed_forward", "mixed_backward")
DENSITY_TAGS = ("fokker_planck", "heat", "continuity")


@dataclass(frozen=True)
class MomentumResidualKind:
    """Which momentum equation to test.

    ``nu`` is the viscosity for Navier-Stokes/Stokes; ``sigma`` the constant diffusion
    coefficient of the mixed-drift equations, whose Laplacian coefficient is ``sigma**2 / 2``.
    """

    tag: str
    nu: float = 0.0
    sigma: float = 0.0

    def __post_init__(self):
        if self.tag not in MOMENTUM_TAGS:
            raise ValueError(f"unknown momentum residual {self.tag!r}")
        if self.nu < 0 or self.sigma < 0:
            raise ValueError("nu and sigma must be non-negative")

    @classmethod
    def navier_stokes(cls, nu):
        return cls("navier_stokes", nu=nu)

    @classmethod
    def euler(cls):
        return cls("euler")

    @classmethod
    def stokes(cls, nu):
        return cls("stokes", nu=nu)

    @classmethod
    def mixed_forward(cls, sigma):
        return cls("mixed_forward", sigma=sigma)

    @classmethod
    def mixed_backward(cls, sigma):
        return cls("mixed_backward", sigma=sigma)

    @property
    def needs_aux(self):
        return self.tag.startswith("mixed")


@dataclass(frozen=True)
class DensityResidualKind:
    tag: str
    kappa: float = 0.0
    drift: Optional[VectorField] = None

    def __post_init__(self):
        if self.tag not in DENSITY_TAGS:
            raise ValueError(f"unknown density residual {self.tag!r}")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if self.tag in ("fokker_planck", "continuity") and self.drift is None:
            raise ValueError(f"{self.tag} residual needs a drift field")

    @classmethod
    def fokker_planck(cls, kappa, drift):
        return cls("fokker_planck", kappa, drift)

    @classmethod
    def heat(cls, kappa):
        return cls("heat", kappa)

    @classmethod
    def continuity(cls, drift):
        return cls("continuity", 0.0, drift)


def momentum_terms(kind, u, p, t, x, u_aux=None, step=DEFAULT_STEP):
    """Individual terms ``(d_t u, (w . grad) u, c * Lap u, grad p)`` of a momentum equation.

    ``w`` is ``u`` itself or the auxiliary field for the mixed kinds and ``c`` is the
    signed Laplacian coefficient as it appears on the left-hand side.
    """
    if kind.needs_aux and u_aux is None:
        raise ValueError(f"{kind.tag} residual needs the paired field u_aux")
    jet = u.jet(t, x, step)
    carrier = u_aux(t, x) if kind.needs_aux else u(t, x)
    adv = np.einsum("...ij,...j->...i", jet.jac, carrier)
    coef = {
        "navier_stokes": -kind.nu,
        "euler": 0.0,
        "stokes": -kind.nu,
        "mixed_forward": -0.5 * kind.sigma**2,
        "mixed_backward": 0.5 * kind.sigma**2,
    }[kind.tag]
    if kind.tag == "stokes":
        adv = np.zeros_like(adv)
    grad_p = p.jet(t, x, step).grad
    return jet.dt, adv, coef * jet.lap, grad_p


def momentum_residual(kind, u, p, t, x, u_aux=None, step=DEFAULT_STEP):
    """LHS - RHS of the momentum equation selected by ``kind``.

    ============== =====================================================
    navier_stokes  ``d_t u + (u.grad)u - nu Lap u + grad p``
    euler          ``d_t u + (u.grad)u + grad p``
    stokes         ``d_t u - nu Lap u + grad p``
    mixed_forward  ``d_t u + (u_aux.grad)u - sigma^2/2 Lap u + grad p``
    mixed_backward ``d_t u + (u_aux.grad)u + sigma^2/2 Lap u + grad p``
    ============== =====================================================
    """
    return sum(momentum_terms(kind, u, p, t, x, u_aux, step))


def momentum_scale(kind, u, p, t, x, u_aux=None, step=DEFAULT_STEP):
    """Root-mean-square size of the largest term, used to make tolerances relative."""
    terms = momentum_terms(kind, u, p, t, x, u_aux, step)
    return max(float(np.sqrt(np.mean(np.sum(term**2, axis=-1)))) for term in terms)


def density_residual(kind, rho, t, x, step=DEFAULT_STEP):
    """LHS - RHS of the density equation selected by ``kind``.

    ``fokker_planck``: ``d_t rho + div(rho b) - kappa Lap rho``; ``heat``:
    ``d_t rho - kappa Lap rho``; ``continuity``: ``d_t rho + div(rho b)``.
    """
    jet = rho.jet(t, x, step)
    out = jet.dt.copy()
    if kind.tag in ("fokker_planck", "continuity"):
        b = kind.drift
        bjet = b.jet(t, x, step)
        out = out + np.sum(jet.grad * b(t, x), axis=-1) + rho(t, x) * bjet.div
    if kind.tag in ("fokker_planck", "heat"):
        out = out - kind.kappa * jet.lap
    return out


def divergence(u: VectorField, t, x, step=DEFAULT_STEP):
    return u.jet(t, x, step).div


def tagged_residual(flow, t, x, tag=None, step=DEFAULT_STEP):
    """Residual of the equation ``tag`` (default: first tag the flow claims) for an exact flow."""
    tag = tag or sorted(flow.satisfies)[0]
    kind = {
        "navier_stokes": MomentumResidualKind.navier_stokes(flow.viscosity),
        "euler": MomentumResidualKind.euler(),
        "stokes": MomentumResidualKind.stokes(flow.viscosity),
    }[tag]
    return momentum_residual(kind, flow.velocity, flow.pressure, t, x, step=step)


__all__ = [
    "MomentumResidualKind", "DensityResidualKind", "momentum_residual", "momentum_terms",
    "momentum_scale", "density_residual", "divergence", "tagged_residual",
]
