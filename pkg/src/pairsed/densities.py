"""Reference densities rho0: evaluation, sampling, cell masses.

A density is written in configs as ``kind key=value ...``, e.g.
``uniform_ball radius=1.0 center=0,0,0`` or ``gaussian sigma=0.4 radius=1.2``.
"""
import math

import numpy as np
from scipy.special import erf

from .errors import InvalidSpecError


class Density:
    kind = 'abstract'
    center = np.zeros(3)
    radius = 1.0

    def density(self, x):
        raise NotImplementedError

    @property
    def sup(self):
        raise NotImplementedError

    def sample(self, m, rng):
        raise NotImplementedError

    def bounds(self):
        return self.center - self.radius, self.center + self.radius

    def describe(self):
        return {'kind': self.kind, 'radius': float(self.radius),
                'center': [float(c) for c in self.center]}

    def cell_masses(self, resolution, subdiv=4):
        """Cell-averaged masses on a resolution^3 grid over the bounding box.

        Returns (centers, masses, cell_size) restricted to cells with mass;
        masses are normalised to sum to one.
        """
        if resolution < 1:
            raise InvalidSpecError('resolution must be >= 1')
        lo, hi = self.bounds()
        h = (hi - lo) / resolution
        idx = np.arange(resolution)
        sub = (np.arange(subdiv) + 0.5) / subdiv
        cx, cy, cz = np.meshgrid(idx, idx, idx, indexing='ij')
        corners = lo + np.stack([cx, cy, cz], -1).reshape(-1, 3) * h
        sx, sy, sz = np.meshgrid(sub, sub, sub, indexing='ij')
        offsets = np.stack([sx, sy, sz], -1).reshape(-1, 3) * h
        mass = np.zeros(corners.shape[0])
        for off in offsets:
            mass += self.density(corners + off)
        mass *= np.prod(h) / offsets.shape[0]
        keep = mass > 0
        mass = mass[keep]
        return corners[keep] + 0.5 * h, mass / mass.sum(), h


def _unit_ball(m, rng):
    d = rng.normal(size=(m, 3))
    d /= np.linalg.norm(d, axis=1)[:, None]
    return d * rng.random(m)[:, None] ** (1.0 / 3.0)


class UniformBall(Density):
    kind = 'uniform_ball'

    def __init__(self, radius=1.0, center=(0.0, 0.0, 0.0)):
        if not radius > 0:
            raise InvalidSpecError('ball radius must be positive')
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=float).reshape(3)
        self.rho0 = 3.0 / (4.0 * np.pi * self.radius**3)

    def density(self, x):
        r = np.linalg.norm(np.asarray(x) - self.center, axis=-1)
        return np.where(r <= self.radius, self.rho0, 0.0)

    @property
    def sup(self):
        return self.rho0

    def sample(self, m, rng):
        return self.center + self.radius * _unit_ball(m, rng)

    def exact_K(self, x, r0, kappa_g):
        """6 pi r0 int Phi(x - y) kappa_g rho(dy) and its gradient, closed form."""
        a = self.radius
        y = np.asarray(x, dtype=float) - self.center
        g = np.asarray(kappa_g, dtype=float)
        r = np.linalg.norm(y, axis=-1)
        inside = r <= a
        rs = np.where(inside, a, r)
        # M(y) = alpha(r) I + beta(r) y y^T;  dalpha = alpha'/r, dbeta = beta'/r
        alpha = np.where(inside, a * a / 3.0 - 2.0 * r * r / 15.0,
                         0.5 * (a**3 / (3.0 * rs) + a**5 / (15.0 * rs**3)))
        beta = np.where(inside, 1.0 / 15.0,
                        0.5 * (a**3 / (3.0 * rs**3) - a**5 / (5.0 * rs**5)))
        dalpha = np.where(inside, -4.0 / 15.0,
                          0.5 * (-a**3 / (3.0 * rs**3) - a**5 / (5.0 * rs**5)))
        dbeta = np.where(inside, 0.0, 0.5 * (-a**3 / rs**5 + a**5 / rs**7))
        scale = 6.0 * np.pi * r0 * self.rho0
        yg = y @ g
        u = scale * (alpha[..., None] * g + (beta * yg)[..., None] * y)
        grad = scale * (dalpha[..., None, None] * g[:, None] * y[..., None, :]
                        + (dbeta * yg)[..., None, None] * y[..., :, None] * y[..., None, :]
                        + beta[..., None, None] * (yg[..., None, None] * np.eye(3)
                                                   + y[..., :, None] * g[None, :]))
        return u, grad


class TruncatedGaussian(Density):
    kind = 'gaussian'

    def __init__(self, sigma=0.5, radius=1.0, center=(0.0, 0.0, 0.0)):
        if not (sigma > 0 and radius > 0):
            raise InvalidSpecError('gaussian needs sigma > 0 and radius > 0')
        self.sigma = float(sigma)
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=float).reshape(3)
        s, a = self.sigma, self.radius
        # int_0^a 4 pi r^2 exp(-r^2 / 2 s^2) dr
        mass = (4 * np.pi * s**3 * (math.sqrt(math.pi / 2) * erf(a / (math.sqrt(2) * s))
                                     - (a / s) * math.exp(-a * a / (2 * s * s))))
        self.norm = 1.0 / mass

    def density(self, x):
        r = np.linalg.norm(np.asarray(x) - self.center, axis=-1)
        val = self.norm * np.exp(-0.5 * (r / self.sigma) ** 2)
        return np.where(r <= self.radius, val, 0.0)

    @property
    def sup(self):
        return self.norm

    def describe(self):
        return {**super().describe(), 'sigma': self.sigma}

    def sample(self, m, rng):
        out = np.empty((0, 3))
        while out.shape[0] < m:
            cand = rng.normal(scale=self.sigma, size=(2 * (m - out.shape[0]) + 8, 3))
            cand = cand[np.linalg.norm(cand, axis=1) <= self.radius]
            out = np.concatenate([out, cand])
        return self.center + out[:m]


class Bump(Density):
    """c (1 - |x|^2/a^2)^2 on the ball of radius a: Lipschitz and compactly supported."""
    kind = 'bump'

    def __init__(self, radius=1.0, center=(0.0, 0.0, 0.0)):
        if not radius > 0:
            raise InvalidSpecError('bump radius must be positive')
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=float).reshape(3)
        self.norm = 105.0 / (32.0 * np.pi * self.radius**3)

    def density(self, x):
        s2 = np.sum((np.asarray(x) - self.center) ** 2, axis=-1) / self.radius**2
        return np.where(s2 <= 1.0, self.norm * (1.0 - s2) ** 2, 0.0)

    @property
    def sup(self):
        return self.norm

    def sample(self, m, rng):
        out = np.empty((0, 3))
        while out.shape[0] < m:
            cand = _unit_ball(3 * (m - out.shape[0]) + 8, rng)
            s2 = np.sum(cand**2, axis=1)
            cand = cand[rng.random(cand.shape[0]) < (1.0 - s2) ** 2]
            out = np.concatenate([out, cand])
        return self.center + self.radius * out[:m]


class Tabulated(Density):
    """Piecewise-constant density on a box grid (values need not be normalised)."""
    kind = 'tabulated'

    def __init__(self, values, origin, spacing):
        values = np.asarray(values, dtype=float)
        if values.ndim != 3 or np.any(values < 0) or values.sum() <= 0:
            raise InvalidSpecError('tabulated density needs a non-negative 3-D array')
        self.spacing = np.broadcast_to(np.asarray(spacing, dtype=float), (3,)).copy()
        self.origin = np.asarray(origin, dtype=float).reshape(3)
        self.values = values / (values.sum() * np.prod(self.spacing))
        ext = self.spacing * np.array(values.shape)
        self.center = self.origin + 0.5 * ext
        self.radius = 0.5 * float(np.linalg.norm(ext))
        self._lo, self._hi = self.origin, self.origin + ext

    def bounds(self):
        return self._lo.copy(), self._hi.copy()

    def density(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.floor((x - self.origin) / self.spacing).astype(int)
        shape = np.array(self.values.shape)
        ok = np.all((idx >= 0) & (idx < shape), axis=-1)
        idx = np.clip(idx, 0, shape - 1)
        return np.where(ok, self.values[idx[..., 0], idx[..., 1], idx[..., 2]], 0.0)

    @property
    def sup(self):
        return float(self.values.max())

    def sample(self, m, rng):
        p = self.values.ravel() * np.prod(self.spacing)
        cells = rng.choice(p.size, size=m, p=p / p.sum())
        ijk = np.stack(np.unravel_index(cells, self.values.shape), -1)
        return self.origin + (ijk + rng.random((m, 3))) * self.spacing

    def describe(self):
        return {'kind': self.kind, 'shape': list(self.values.shape),
                'origin': self.origin.tolist(), 'spacing': self.spacing.tolist()}


KINDS = {'uniform_ball': UniformBall, 'gaussian': TruncatedGaussian, 'bump': Bump}


def parse_density(text):
    """Build a density from ``kind key=value ...`` (vectors comma-separated)."""
    if isinstance(text, Density):
        return text
    parts = str(text).split()
    if not parts or parts[0] not in KINDS:
        known = ', '.join(sorted(KINDS) + ['tabulated'])
        raise InvalidSpecError(f'unknown density spec {text!r} (known: {known})')
    kwargs = {}
    for item in parts[1:]:
        key, sep, val = item.partition('=')
        if not sep:
            raise InvalidSpecError(f'density parameter {item!r} is not key=value')
        nums = [float(v) for v in val.split(',')]
        kwargs[key] = nums if len(nums) > 1 else nums[0]
    try:
        return KINDS[parts[0]](**kwargs)
    except TypeError as exc:
        raise InvalidSpecError(f'bad parameters for {parts[0]}: {exc}') from None


def lattice_in_ball(n, radius=1.0, center=(0.0, 0.0, 0.0)):
    """n points of the cubic lattice closest to the centre, spacing chosen so
    that n lattice cells have the volume of the ball (quadrature-like cloud)."""
    h = radius * (4.0 * np.pi / (3.0 * n)) ** (1.0 / 3.0)
    k = int(math.ceil(radius / h)) + 2
    ax = (np.arange(-k, k) + 0.5) * h
    pts = np.stack(np.meshgrid(ax, ax, ax, indexing='ij'), -1).reshape(-1, 3)
    order = np.argsort(np.linalg.norm(pts, axis=1), kind='stable')
    return np.asarray(center, dtype=float) + pts[order[:n]]
