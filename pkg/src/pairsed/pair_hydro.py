"""Hydrodynamics of two identical translating spheres.

Every 3x3 tensor here has the form g I + h P with P = xi_hat xi_hat^T, so the
algebra is carried on the scalar coefficients (g, h) and only expanded into
matrices at the API boundary.  Inversion uses

    (g I + h P)^-1 = I/g - h/(g (g + h)) P.

The mobility coefficients come from a closure object.  The default is the
point-Stokeslet closure a1 = I, a2 = 6 pi R Phi(2 R xi), which is what the
far-field pair representation below assumes.
"""
from dataclasses import dataclass

import numpy as np

from .errors import InvalidSpecError, NearFieldError, OverlapError
from .kernels import oseen_tensor

DEFAULT_M1 = 8.0
DEFAULT_M2 = 1.2
SIX_PI = 6.0 * np.pi


def _xi_stack(xi):
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1:] != (3,) or not np.all(np.isfinite(xi)):
        raise OverlapError('orientation must be a finite 3-vector')
    n = np.linalg.norm(xi, axis=-1)
    bad = n <= 1.0
    if np.any(bad):
        idx = np.flatnonzero(np.atleast_1d(bad))
        raise OverlapError(f'|xi| <= 1 (spheres overlap) at index {idx.tolist()}',
                           pairs=idx.tolist())
    return xi, n


def _expand(g, h, xi, n):
    """Assemble g I + h xi_hat xi_hat^T for stacks of coefficients."""
    u = xi / n[..., None]
    return (g[..., None, None] * np.eye(3)
            + h[..., None, None] * u[..., :, None] * u[..., None, :])


def _inverse(g, h):
    if np.any(g <= 0) or np.any(g + h <= 0):
        raise ArithmeticError('singular pair matrix (g <= 0 or g + h <= 0)')
    return 1.0 / g, -h / (g * (g + h))


class PointStokesletClosure:
    """a1 = I, a2 = (3 / (8|xi|)) (I + P)."""

    name = 'point_stokeslet'

    def coefficients(self, n):
        c = 3.0 / (8.0 * n)
        one = np.ones_like(n)
        return one, np.zeros_like(n), c, c


DEFAULT_CLOSURE = PointStokesletClosure()


@dataclass(frozen=True)
class MobilityPair:
    a1: np.ndarray
    a2: np.ndarray


@dataclass(frozen=True)
class ResistancePair:
    A1: np.ndarray
    A2: np.ndarray


@dataclass(frozen=True)
class PairForces:
    F1: np.ndarray
    F2: np.ndarray


@dataclass(frozen=True)
class PairGeometry:
    """Centre x_plus, orientation xi = (x1 - x2) / (2R) and sphere radius R."""
    x_plus: np.ndarray
    xi: np.ndarray
    R: float

    def __post_init__(self):
        object.__setattr__(self, 'x_plus', np.asarray(self.x_plus, dtype=float))
        _xi_stack(self.xi)
        object.__setattr__(self, 'xi', np.asarray(self.xi, dtype=float))
        if not self.R > 0:
            raise InvalidSpecError('sphere radius must be positive')

    @property
    def x1(self):
        return self.x_plus + self.R * self.xi

    @property
    def x2(self):
        return self.x_plus - self.R * self.xi


def mobility_coefficients(xi, closure=DEFAULT_CLOSURE):
    xi, n = _xi_stack(xi)
    return closure.coefficients(n)


def resistance_coefficients(xi, closure=DEFAULT_CLOSURE):
    """Scalar coefficients (g, h) of A1 and A2."""
    xi, n = _xi_stack(xi)
    g1, h1, g2, h2 = closure.coefficients(n)
    ps, qs = _inverse(g1 + g2, h1 + h2)
    pd, qd = _inverse(g1 - g2, h1 - h2)
    return 0.5 * (ps + pd), 0.5 * (qs + qd), 0.5 * (ps - pd), 0.5 * (qs - qd)


def mobility_pair(xi, closure=DEFAULT_CLOSURE):
    xi, n = _xi_stack(xi)
    g1, h1, g2, h2 = closure.coefficients(n)
    return MobilityPair(_expand(g1, h1, xi, n), _expand(g2, h2, xi, n))


def resistance_pair(xi, closure=DEFAULT_CLOSURE):
    """A1 = ((a1+a2)^-1 + (a1-a2)^-1)/2, A2 = ((a1+a2)^-1 - (a1-a2)^-1)/2."""
    xi, n = _xi_stack(xi)
    G1, H1, G2, H2 = resistance_coefficients(xi, closure)
    return ResistancePair(_expand(G1, H1, xi, n), _expand(G2, H2, xi, n))


def settling_matrix(xi, closure=DEFAULT_CLOSURE):
    """(A1 + A2)^-1 = a1 + a2, the mean velocity of a pair per unit kappa g."""
    xi, n = _xi_stack(xi)
    g1, h1, g2, h2 = closure.coefficients(n)
    return _expand(g1 + g2, h1 + h2, xi, n)


def settling_velocity(xi, kappa_g, closure=DEFAULT_CLOSURE):
    """(a1 + a2) kappa_g without forming matrices; xi may be a stack."""
    xi, n = _xi_stack(xi)
    g1, h1, g2, h2 = closure.coefficients(n)
    u = xi / n[..., None]
    kg = np.asarray(kappa_g, dtype=float)
    proj = np.sum(u * kg, axis=-1)
    return (g1 + g2)[..., None] * kg + ((h1 + h2) * proj)[..., None] * u


def _apply(g, h, u, v):
    return g[..., None] * v + (h * np.sum(u * v, axis=-1))[..., None] * u


def pair_forces(xi, U1, U2, R, closure=DEFAULT_CLOSURE):
    """F1 = -6 pi R (A1 U1 + A2 U2), F2 = -6 pi R (A2 U1 + A1 U2)."""
    if not R > 0:
        raise InvalidSpecError('sphere radius must be positive')
    xi, n = _xi_stack(xi)
    G1, H1, G2, H2 = resistance_coefficients(xi, closure)
    u = xi / n[..., None]
    U1 = np.asarray(U1, dtype=float)
    U2 = np.asarray(U2, dtype=float)
    F1 = -SIX_PI * R * (_apply(G1, H1, u, U1) + _apply(G2, H2, u, U2))
    F2 = -SIX_PI * R * (_apply(G2, H2, u, U1) + _apply(G1, H1, u, U2))
    return PairForces(F1, F2)


def pair_field(x, geom, forces, refinement='leading', m1=DEFAULT_M1):
    """Far-field velocity generated by a pair exerting drag forces F1, F2.

    leading:       -Phi(x_plus - x) (F1 + F2)
    two_stokeslet: -Phi(x1 - x) F1 - Phi(x2 - x) F2
    Only valid for |x - x_plus| > 4 m1 R.
    """
    x = np.asarray(x, dtype=float)
    dist = np.linalg.norm(x - geom.x_plus, axis=-1)
    if np.any(dist <= 4.0 * m1 * geom.R):
        raise NearFieldError(
            f'pair field requested within 4*M1*R = {4.0 * m1 * geom.R:g} of the pair centre')
    F1 = np.asarray(forces.F1, dtype=float)
    F2 = np.asarray(forces.F2, dtype=float)
    if refinement == 'leading':
        return -np.einsum('...ab,b->...a', oseen_tensor(geom.x_plus - x), F1 + F2)
    if refinement == 'two_stokeslet':
        return (-np.einsum('...ab,b->...a', oseen_tensor(geom.x1 - x), F1)
                - np.einsum('...ab,b->...a', oseen_tensor(geom.x2 - x), F2))
    raise InvalidSpecError(f'unknown refinement {refinement!r}')
