"""Oseen tensor (Stokeslet), its pressure companion, analytic derivatives and
the smooth cutoff used by the discrete convolution operator.

Every function accepts a single 3-vector or a stack of them with shape
(..., 3) and returns the matching stack of tensors.
"""
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, InvalidSpecError

INV_8PI = 1.0 / (8.0 * np.pi)
INV_4PI = 1.0 / (4.0 * np.pi)
EYE3 = np.eye(3)


@dataclass(frozen=True)
class CutoffSpec:
    """Radii of the cutoff band, in units of d_min.

    chi vanishes for r <= inner and equals one for r >= outer.
    """
    inner: float = 0.25
    outer: float = 0.5

    def __post_init__(self):
        if not (np.isfinite(self.inner) and np.isfinite(self.outer)):
            raise InvalidSpecError('cutoff radii must be finite')
        if not 0.0 < self.inner < self.outer:
            raise InvalidSpecError(
                f'cutoff needs 0 < inner < outer, got ({self.inner}, {self.outer})')


DEFAULT_CUTOFF = CutoffSpec()


def _as_points(x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (3,):
        raise DegenerateInputError(f'expected trailing dimension 3, got shape {x.shape}')
    if not np.all(np.isfinite(x)):
        raise DegenerateInputError('non-finite kernel argument')
    return x


def _nonzero_points(x):
    x = _as_points(x)
    r = np.linalg.norm(x, axis=-1)
    if np.any(r == 0.0):
        raise DegenerateInputError('kernel evaluated at the origin')
    return x, r


def oseen_tensor(x):
    """(1/8pi)(I/|x| + x x^T/|x|^3)."""
    x, r = _nonzero_points(x)
    r = r[..., None, None]
    return INV_8PI * (EYE3 / r + x[..., :, None] * x[..., None, :] / r**3)


def oseen_pressure(x):
    """x/(4pi|x|^3), the pressure paired with the Oseen velocity."""
    x, r = _nonzero_points(x)
    return INV_4PI * x / r[..., None]**3


def oseen_derivative(x, order=1):
    """Analytic spatial derivatives of the Oseen tensor.

    order=1 returns D[..., a, b, c] = d_c Phi_ab,
    order=2 returns D[..., a, b, c, d] = d_d d_c Phi_ab.
    """
    x, r = _nonzero_points(x)
    d = EYE3
    if order == 1:
        r3 = r[..., None, None, None]**3
        r5 = r3 * r[..., None, None, None]**2
        xa = x[..., :, None, None]
        xb = x[..., None, :, None]
        xc = x[..., None, None, :]
        return INV_8PI * (
            (-d[:, :, None] * xc + d[:, None, :] * xb + d[None, :, :] * xa) / r3
            - 3.0 * xa * xb * xc / r5)
    if order == 2:
        rr = r[..., None, None, None, None]
        r3, r5, r7 = rr**3, rr**5, rr**7
        xa = x[..., :, None, None, None]
        xb = x[..., None, :, None, None]
        xc = x[..., None, None, :, None]
        xd = x[..., None, None, None, :]
        d_ab = d[:, :, None, None]
        d_ac = d[:, None, :, None]
        d_ad = d[:, None, None, :]
        d_bc = d[None, :, :, None]
        d_bd = d[None, :, None, :]
        d_cd = d[None, None, :, :]
        return INV_8PI * (
            -d_ab * (d_cd / r3 - 3.0 * xc * xd / r5)
            + (d_ac * d_bd + d_bc * d_ad) / r3
            - 3.0 * (d_ac * xb + d_bc * xa) * xd / r5
            - 3.0 * (d_ad * xb * xc + d_bd * xa * xc + d_cd * xa * xb) / r5
            + 15.0 * xa * xb * xc * xd / r7)
    raise InvalidSpecError(f'unsupported derivative order {order!r}')


def cutoff_chi(r, spec=DEFAULT_CUTOFF):
    """Smoothstep 3t^2 - 2t^3 across [inner, outer]; 0 below, 1 above."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0) or not np.all(np.isfinite(r)):
        raise DegenerateInputError('cutoff radius must be finite and non-negative')
    t = np.clip((r - spec.inner) / (spec.outer - spec.inner), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def cutoff_chi_prime(r, spec=DEFAULT_CUTOFF):
    """d chi / d r (zero outside the band)."""
    r = np.asarray(r, dtype=float)
    w = spec.outer - spec.inner
    t = (r - spec.inner) / w
    inside = (t > 0.0) & (t < 1.0)
    return np.where(inside, 6.0 * t * (1.0 - t) / w, 0.0)


def truncated_oseen(x, d_min, spec=DEFAULT_CUTOFF):
    """chi(|x|/d_min) Phi(x); exactly zero inside inner*d_min, including x = 0."""
    if not (np.isfinite(d_min) and d_min > 0):
        raise DegenerateInputError(f'd_min must be positive, got {d_min}')
    x = _as_points(x)
    r = np.linalg.norm(x, axis=-1)
    out = np.zeros(x.shape[:-1] + (3, 3))
    live = r > spec.inner * d_min
    if np.any(live):
        chi = cutoff_chi(r[live] / d_min, spec)
        out[live] = chi[:, None, None] * oseen_tensor(x[live])
    return out
