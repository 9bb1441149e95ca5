"""Stored-energy density for the cavitation model and its derivatives.

The model combines a power-law isochoric term with a convex volumetric
penalty,

    W(F) = mu * |F|^s + d(det F),      d(xi) = kappa_vol * (xi - 1)^2 + d1(xi),

with |F| the Frobenius norm and 1 < s < 2 in two dimensions.  All
derivatives are analytic; finite differences are reserved for the tests.
Every function accepts stacked inputs: ``F`` may have shape ``(..., 2, 2)``
and scalars broadcast accordingly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import MaterialDomainError

__all__ = [
    "Volumetric",
    "reciprocal_volumetric",
    "MaterialParams",
    "frobenius",
    "det2",
    "cof2",
    "d_derivatives",
    "energy_density",
    "first_piola",
    "tangent_action",
]

# Below this Frobenius norm the |F|^(s-2) factors are considered singular.
_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class Volumetric:
    """Convex volumetric term d(xi) = kappa*(xi-1)^2 + d1(xi).

    ``d1``, ``d1p`` and ``d1pp`` evaluate the convex part and its first two
    derivatives; they must accept numpy arrays.
    """

    kappa: float
    d1: Callable[[np.ndarray], np.ndarray]
    d1p: Callable[[np.ndarray], np.ndarray]
    d1pp: Callable[[np.ndarray], np.ndarray]
    name: str = "custom"


def reciprocal_volumetric() -> Volumetric:
    """The default preset: kappa = 1/2 and d1(xi) = 1/xi.

    Expands to d(xi) = (xi-1)^2/2 + 1/xi, the choice used by the shipped
    experiment configurations.
    """
    return Volumetric(
        kappa=0.5,
        d1=lambda xi: 1.0 / xi,
        d1p=lambda xi: -(xi ** -2),
        d1pp=lambda xi: 2.0 * xi ** -3,
        name="reciprocal",
    )


@dataclass(frozen=True)
class MaterialParams:
    """Isochoric modulus ``mu``, growth exponent ``s`` and volumetric term.

    ``s`` must lie strictly between 1 and 2 (two-dimensional setting) and
    ``mu`` must be positive.
    """

    mu: float = 2.0 / 3.0
    s: float = 1.5
    volumetric: Volumetric = field(default_factory=reciprocal_volumetric)

    def __post_init__(self):
        if not 1.0 < self.s < 2.0:
            raise MaterialDomainError(f"exponent s must satisfy 1 < s < 2, got {self.s}")
        if self.mu <= 0.0:
            raise MaterialDomainError(f"modulus mu must be positive, got {self.mu}")


def frobenius(F: np.ndarray) -> np.ndarray:
    """Frobenius norm over the trailing 2x2 axes."""
    F = np.asarray(F, dtype=float)
    return np.sqrt(np.sum(F * F, axis=(-2, -1)))


def det2(F: np.ndarray) -> np.ndarray:
    """Determinant over the trailing 2x2 axes."""
    F = np.asarray(F, dtype=float)
    return F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]


def cof2(F: np.ndarray) -> np.ndarray:
    """Cofactor matrix of a 2x2 stack: cof(F) : G = d/dt det(F + tG)."""
    F = np.asarray(F, dtype=float)
    out = np.empty_like(F)
    out[..., 0, 0] = F[..., 1, 1]
    out[..., 0, 1] = -F[..., 1, 0]
    out[..., 1, 0] = -F[..., 0, 1]
    out[..., 1, 1] = F[..., 0, 0]
    return out


def _check_positive_det(det: np.ndarray, what: str) -> None:
    if np.any(det <= 0.0):
        bad = float(np.min(det))
        raise MaterialDomainError(f"{what} requires det F > 0, got min det = {bad:g}")


def d_derivatives(xi, params: MaterialParams):
    """Volumetric term d and its first two derivatives at xi (> 0).

    Returns the triple (d, d', d'') with the same shape as ``xi``.
    """
    xi = np.asarray(xi, dtype=float)
    if np.any(xi <= 0.0):
        raise MaterialDomainError(f"volumetric term requires xi > 0, got min xi = {np.min(xi):g}")
    vol = params.volumetric
    k = vol.kappa
    d = k * (xi - 1.0) ** 2 + vol.d1(xi)
    dp = 2.0 * k * (xi - 1.0) + vol.d1p(xi)
    dpp = 2.0 * k + vol.d1pp(xi)
    return d, dp, dpp


def energy_density(F, params: MaterialParams):
    """Pointwise stored energy mu*|F|^s + d(det F); requires det F > 0."""
    F = np.asarray(F, dtype=float)
    det = det2(F)
    _check_positive_det(det, "energy_density")
    d, _, _ = d_derivatives(det, params)
    return params.mu * frobenius(F) ** params.s + d


def first_piola(F, params: MaterialParams):
    """Derivative of the stored energy with respect to F.

    Returns mu*s*|F|^(s-2)*F + d'(det F)*cof F, shaped like ``F``.
    """
    F = np.asarray(F, dtype=float)
    det = det2(F)
    _check_positive_det(det, "first_piola")
    nrm = frobenius(F)
    if np.any(nrm < _NORM_FLOOR):
        raise MaterialDomainError("first_piola: |F| below the singularity guard")
    _, dp, _ = d_derivatives(det, params)
    s = params.s
    coef = params.mu * s * nrm ** (s - 2.0)
    return coef[..., None, None] * F + dp[..., None, None] * cof2(F)


def tangent_action(F, p, G, H, params: MaterialParams):
    """Second-derivative integrand of the pressure-relaxed energy.

    Evaluates, pointwise,

        mu*s*(s-2)*|F|^(s-4) (F:G)(F:H) + mu*s*|F|^(s-2) (G:H)
        + d''(det F) (cof F:G)(cof F:H) + (d'(det F) - p) (cof G:H),

    which is symmetric in (G, H).  Broadcasts over stacked inputs.
    """
    F = np.asarray(F, dtype=float)
    G = np.asarray(G, dtype=float)
    H = np.asarray(H, dtype=float)
    p = np.asarray(p, dtype=float)
    det = det2(F)
    _check_positive_det(det, "tangent_action")
    nrm = frobenius(F)
    if np.any(nrm < _NORM_FLOOR):
        raise MaterialDomainError("tangent_action: |F| below the singularity guard")
    _, dp, dpp = d_derivatives(det, params)
    s, mu = params.s, params.mu
    cof = cof2(F)

    def ddot(A, B):
        return np.sum(A * B, axis=(-2, -1))

    t1 = mu * s * (s - 2.0) * nrm ** (s - 4.0) * ddot(F, G) * ddot(F, H)
    t2 = mu * s * nrm ** (s - 2.0) * ddot(G, H)
    t3 = dpp * ddot(cof, G) * ddot(cof, H)
    t4 = (dp - p) * ddot(cof2(G), H)
    return t1 + t2 + t3 + t4
