"""Solvers for the mean-field limits.

Kinetic model: particles (x, xi, w) sampling mu(t, x, xi), moving with
    x' = (a1 + a2)(xi) kappa_g + u(x),   xi' = grad u(x) xi,
    u = 6 pi r0 sum_k w_k Phi_delta(x - x_k) kappa_g.

Correlated model: particles sample rho only; the orientation is a field F on
a box grid, transported by v = (a1 + a2)(F) kappa_g + u with source grad u F,
advanced by semi-Lagrangian characteristics.
"""
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import map_coordinates

from . import _fast
from .densities import parse_density
from .errors import BlowUpError, DomainExitError, InvalidSpecError, NonConvergenceError
from .pair_hydro import DEFAULT_CLOSURE, settling_velocity


@dataclass(frozen=True)
class BlobSpec:
    delta: float

    def __post_init__(self):
        if not (np.isfinite(self.delta) and self.delta > 0):
            raise InvalidSpecError('blob delta must be positive')


@dataclass
class Ensemble:
    """Weighted particles; xi may be None for a rho-only ensemble."""
    x: np.ndarray
    weights: np.ndarray
    xi: np.ndarray = None
    time: float = 0.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.xi is not None:
            self.xi = np.asarray(self.xi, dtype=float).reshape(-1, 3)
        if self.weights.shape[0] != self.x.shape[0] or np.any(self.weights < 0):
            raise InvalidSpecError('one non-negative weight per particle required')

    @property
    def M(self):
        return self.x.shape[0]


@dataclass(frozen=True)
class Physics:
    r0: float
    kappa_g: tuple

    @property
    def g(self):
        return np.asarray(self.kappa_g, dtype=float)


def typical_spacing(ens):
    """(volume of the ensemble's bounding ball / M)^(1/3)."""
    c = np.average(ens.x, axis=0, weights=ens.weights)
    rad = np.linalg.norm(ens.x - c, axis=1).max() if ens.M > 1 else 1.0
    return (4.0 / 3.0 * np.pi * rad**3 / ens.M) ** (1.0 / 3.0)


def default_blob(ens):
    return BlobSpec(2.0 * typical_spacing(ens))


def blob_oseen(x, delta):
    """Phi_delta(x) = (1/8pi)(I/s + x x^T/s^3), s = sqrt(|x|^2 + delta^2)."""
    x = np.asarray(x, dtype=float)
    s = np.sqrt(np.sum(x * x, axis=-1) + delta * delta)[..., None, None]
    return (np.eye(3) / s + x[..., :, None] * x[..., None, :] / s**3) / (8.0 * np.pi)


def continuous_K_and_grad(ens, x, blob, phys):
    x = np.ascontiguousarray(np.asarray(x, dtype=float).reshape(-1, 3))
    u, g = _fast.blob_oseen_sum(x, np.ascontiguousarray(ens.x), ens.weights,
                                float(blob.delta), phys.g)
    scale = 6.0 * np.pi * phys.r0
    return scale * u, scale * g


def continuous_K(ens, x, blob, phys):
    """6 pi r0 sum_k w_k Phi_delta(x - x_k) kappa_g at points x (..., 3)."""
    x = np.asarray(x, dtype=float)
    return continuous_K_and_grad(ens, x, blob, phys)[0].reshape(x.shape)


def continuous_K_gradient(ens, x, blob, phys):
    x = np.asarray(x, dtype=float)
    return continuous_K_and_grad(ens, x, blob, phys)[1].reshape(x.shape[:-1] + (3, 3))


def sample_density(rho0_spec, M, seed):
    """M equal-weight i.i.d. samples of rho0."""
    if M < 1:
        raise InvalidSpecError('M must be >= 1')
    rho = parse_density(rho0_spec)
    x = rho.sample(int(M), np.random.default_rng(seed))
    return Ensemble(x, np.full(int(M), 1.0 / M))


def quadrature_ensemble(rho0_spec, resolution):
    """Cell-centre nodes of a resolution^3 grid weighted by cell masses.

    A deterministic, low-noise discretization of rho for smooth densities;
    pair it with a blob of about one cell width.
    """
    rho = parse_density(rho0_spec)
    centers, masses, h = rho.cell_masses(int(resolution))
    return Ensemble(centers, masses), float(np.max(h))


def _check_finite(*arrays, time=None):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise BlowUpError(f'non-finite state at t = {time}', time=time)


# --- kinetic model -----------------------------------------------------------

def _kinetic_rhs(ens, x, xi, blob, phys, ambient, closure):
    if ambient is None:
        tmp = Ensemble(x, ens.weights)
        u, g = continuous_K_and_grad(tmp, x, blob, phys)
    else:
        u, g = ambient(x)
    return settling_velocity(xi, phys.g, closure) + u, np.einsum('iab,ib->ia', g, xi)


def step_meso_kinetic(ens, dt, blob, phys, scheme='rk4', ambient=None, closure=DEFAULT_CLOSURE):
    """One step of the kinetic particle system.

    `ambient`, if given, replaces the self-consistent flow: a callable
    x -> (u, grad u) (used for manufactured tests).
    """
    if not dt > 0:
        raise InvalidSpecError('dt must be positive')
    if ens.xi is None:
        raise InvalidSpecError('kinetic ensemble needs orientations')
    x0, q0 = ens.x, ens.xi
    f = lambda x, q: _kinetic_rhs(ens, x, q, blob, phys, ambient, closure)
    if scheme == 'euler':
        a = f(x0, q0)
        x1, q1 = x0 + dt * a[0], q0 + dt * a[1]
    elif scheme == 'rk4':
        k1 = f(x0, q0)
        k2 = f(x0 + 0.5 * dt * k1[0], q0 + 0.5 * dt * k1[1])
        k3 = f(x0 + 0.5 * dt * k2[0], q0 + 0.5 * dt * k2[1])
        k4 = f(x0 + dt * k3[0], q0 + dt * k3[1])
        x1 = x0 + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        q1 = q0 + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    else:
        raise InvalidSpecError(f'unknown scheme {scheme!r}')
    _check_finite(x1, q1, time=ens.time + dt)
    return Ensemble(x1, ens.weights, q1, ens.time + dt)


# --- orientation field on a grid ---------------------------------------------

@dataclass
class FField:
    """Vector field sampled on the nodes of a uniform box grid.

    values has shape (nx, ny, nz, 3); node (i, j, k) sits at
    origin + (i, j, k) * spacing.  order 1 = trilinear, 3 = cubic spline.
    """
    origin: np.ndarray
    spacing: np.ndarray
    values: np.ndarray
    time: float = 0.0
    order: int = 1

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.spacing = np.broadcast_to(np.asarray(self.spacing, dtype=float), (3,)).copy()
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 4 or self.values.shape[-1] != 3:
            raise InvalidSpecError('FField values must have shape (nx, ny, nz, 3)')
        if np.any(self.spacing <= 0):
            raise InvalidSpecError('grid spacing must be positive')
        if self.order not in (1, 3):
            raise InvalidSpecError('interpolation order must be 1 or 3')

    @property
    def shape(self):
        return self.values.shape[:3]

    @property
    def upper(self):
        return self.origin + self.spacing * (np.array(self.shape) - 1)

    def nodes(self):
        axes = [self.origin[d] + self.spacing[d] * np.arange(self.shape[d]) for d in range(3)]
        return np.stack(np.meshgrid(*axes, indexing='ij'), -1)

    def contains(self, x, tol=1e-12):
        x = np.asarray(x, dtype=float)
        span = self.upper - self.origin
        return np.all((x >= self.origin - tol * span) & (x <= self.upper + tol * span), axis=-1)

    def __call__(self, x, clamp=False):
        """Interpolate at points x (..., 3).

        Points outside the grid raise DomainExitError unless clamp is set, in
        which case they take the value at the nearest boundary point.
        """
        x = np.asarray(x, dtype=float)
        pts = x.reshape(-1, 3)
        if clamp:
            pts = np.clip(pts, self.origin, self.upper)
        elif not np.all(self.contains(pts)):
            bad = int(np.count_nonzero(~self.contains(pts)))
            raise DomainExitError(f'{bad} interpolation points lie outside the F grid')
        coords = ((pts - self.origin) / self.spacing).T
        out = np.empty((pts.shape[0], 3))
        for c in range(3):
            out[:, c] = map_coordinates(self.values[..., c], coords, order=self.order,
                                        mode='nearest', prefilter=True)
        return out.reshape(x.shape)

    def with_values(self, values, time):
        return replace(self, values=np.asarray(values, dtype=float), time=float(time))

    @classmethod
    def from_function(cls, fn, lo, hi, n, order=1, time=0.0):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        n = np.broadcast_to(np.asarray(n, dtype=int), (3,))
        spacing = (hi - lo) / (n - 1)
        f = cls(lo, spacing, np.zeros(tuple(n) + (3,)), time, order)
        f.values = np.asarray(fn(f.nodes()), dtype=float).reshape(tuple(n) + (3,))
        return f


def grid_gradient(F):
    """Central-difference gradient dF_a/dx_b on the nodes, shape (..., 3, 3)."""
    g = np.stack([np.gradient(F.values[..., a], *F.spacing, edge_order=2) for a in range(3)], 0)
    return np.moveaxis(np.stack(g, 0), (0, 1), (-2, -1))


def _settle(F_vals, phys, closure, settling):
    if settling is not None:
        return settling(F_vals)
    return settling_velocity(F_vals, phys.g, closure)


def _sl_step(F, Fsrc_n, Fsrc_np1, vel_n, vel_np1, flow_n, flow_np1, dt, order):
    """One semi-Lagrangian step for the linear transport problem

        dF^/dt + v . grad F^ = grad u Fsrc,

    given node values of the coefficient velocity v and of the source field
    at both time levels.  flow_* are callables x -> grad u(x).
    order 1: Euler foot, explicit source at the foot.
    order 2: midpoint foot with the time-averaged velocity, trapezoidal source.
    Feet of inflow-boundary nodes are clamped to the grid; that pollution
    travels inward at the flow speed, so the grid must have margin around
    the region of interest.
    """
    nodes = F.nodes().reshape(-1, 3)
    if order == 1:
        foot = nodes - dt * vel_n.reshape(-1, 3)
        src = np.einsum('iab,ib->ia', flow_n(foot),
                        F.with_values(Fsrc_n, F.time)(foot, clamp=True))
        return F(foot, clamp=True) + dt * src
    vbar = F.with_values(0.5 * (vel_n + vel_np1), F.time)
    mid = nodes - 0.5 * dt * vbar.values.reshape(-1, 3)
    foot = nodes - dt * vbar(mid, clamp=True)
    src_foot = np.einsum('iab,ib->ia', flow_n(foot),
                         F.with_values(Fsrc_n, F.time)(foot, clamp=True))
    src_node = np.einsum('iab,ib->ia', flow_np1(nodes), Fsrc_np1.reshape(-1, 3))
    return F(foot, clamp=True) + 0.5 * dt * (src_foot + src_node)


def _check_inside(F, pts):
    inside = F.contains(pts)
    if not np.all(inside):
        raise DomainExitError(
            f'{int(np.count_nonzero(~inside))} particles left the F grid; '
            'enlarge the domain to cover supp rho plus the settling drift')


def transport_F(F0, coeff_history, src_history, flow, times, order=1, phys=None,
                closure=DEFAULT_CLOSURE, settling=None):
    """Solve the linear transport problem for F^ over the time levels `times`.

    coeff_history[n] : node values of the F used in the coefficient (a1+a2)(F) kappa_g
    src_history[n]   : node values of the F in the source grad u F
    flow(t)          : callable returning (u_fn, grad_fn) at time t for points x
    Returns the list of node-value arrays of F^ at every time level.
    """
    nodes = F0.nodes().reshape(-1, 3)
    out = [F0.values.copy()]
    F = F0
    for n in range(len(times) - 1):
        t0, t1 = times[n], times[n + 1]
        dt = t1 - t0
        u0, g0 = flow(t0)
        u1, g1 = flow(t1)
        vel_n = (_settle(coeff_history[n].reshape(-1, 3), phys, closure, settling)
                 + u0(nodes)).reshape(F0.values.shape)
        vel_np1 = (_settle(coeff_history[n + 1].reshape(-1, 3), phys, closure, settling)
                   + u1(nodes)).reshape(F0.values.shape)
        new = _sl_step(F, src_history[n], src_history[n + 1], vel_n, vel_np1, g0, g1, dt, order)
        F = F.with_values(new.reshape(F0.values.shape), t1)
        out.append(F.values.copy())
    return out


@dataclass
class PicardResult:
    history: list = field(default_factory=list)       # F^k at final time, per iterate
    increments: list = field(default_factory=list)    # sup-norm of F^{k+1} - F^k over space-time
    levels: list = field(default_factory=list)        # fixed point at every time level
    times: np.ndarray = None
    converged: bool = False

    @property
    def ratios(self):
        inc = np.asarray(self.increments)
        return (inc[1:] / inc[:-1]).tolist() if inc.size > 1 else []

    def field_at(self, F0, n=-1):
        return F0.with_values(self.levels[n], self.times[n])


def picard_solve_F(flow, F0, T, nsteps, phys=None, tol=1e-10, max_iter=50, order=1,
                   closure=DEFAULT_CLOSURE, settling=None, initial=None):
    """Fixed point F = A(F) of the linear transport map by Picard iteration.

    flow(t) returns (u, grad u) as callables of x for the frozen ambient flow.
    `settling`, if given, replaces F -> (a1 + a2)(F) kappa_g.
    `initial` optionally seeds the iteration with a full space-time history.
    """
    if not (T > 0 and nsteps >= 1):
        raise InvalidSpecError('need T > 0 and nsteps >= 1')
    times = np.linspace(0.0, T, nsteps + 1)
    if initial is None:
        levels = [F0.values.copy() for _ in times]
    else:
        levels = [np.asarray(v, dtype=float).copy() for v in initial]
    res = PicardResult(times=times)
    for k in range(max_iter):
        new = transport_F(F0, levels, levels, flow, times, order, phys, closure, settling)
        inc = max(float(np.abs(a - b).max()) for a, b in zip(new, levels))
        res.increments.append(inc)
        res.history.append(new[-1])
        levels = new
        if inc < tol:
            res.converged = True
            break
        if k >= 3 and inc >= res.increments[-2] >= res.increments[-3]:
            raise NonConvergenceError(
                f'Picard increments stalled at {inc:.3g} > tol; T may exceed the local horizon',
                res.increments)
    if not res.converged:
        raise NonConvergenceError(f'Picard did not reach tol={tol:g} in {max_iter} iterations',
                                  res.increments)
    res.levels = levels
    return res


def linear_flow(G):
    """Ambient flow u(x) = G x as a time-independent sampler."""
    G = np.asarray(G, dtype=float)
    u = lambda x: np.asarray(x).reshape(-1, 3) @ G.T
    g = lambda x: np.broadcast_to(G, (np.asarray(x).reshape(-1, 3).shape[0], 3, 3))
    return lambda t: (u, g)


# --- correlated model --------------------------------------------------------

def _ensemble_flow(ens, blob, phys):
    u = lambda x: continuous_K_and_grad(ens, x, blob, phys)[0]
    g = lambda x: continuous_K_and_grad(ens, x, blob, phys)[1]
    return u, g


def step_meso_correlated(ens, F, dt, blob, phys, order=1, closure=DEFAULT_CLOSURE,
                         settling=None, ambient=None):
    """Advance (rho particles, F grid) by dt.

    Particles move with (a1 + a2)(F(x)) kappa_g + u(x); F is updated by one
    semi-Lagrangian step.  order 2 uses a predictor for the new time level so
    that the foot and the source are time-centred.  `ambient`, if given, is a
    callable x -> (u, grad u) replacing the self-consistent flow.
    """
    if not dt > 0:
        raise InvalidSpecError('dt must be positive')
    _check_inside(F, ens.x)
    nodes = F.nodes().reshape(-1, 3)
    shape = F.values.shape

    def flow_of(e):
        if ambient is not None:
            return (lambda x: ambient(x)[0]), (lambda x: ambient(x)[1])
        return _ensemble_flow(e, blob, phys)

    def velocity(e, Fv, pts):
        ufn, _ = flow_of(e)
        return _settle(Fv(pts), phys, closure, settling) + ufn(pts)

    u0, g0 = flow_of(ens)
    un = u0(np.concatenate([nodes, ens.x]))
    vel_nodes = _settle(F.values.reshape(-1, 3), phys, closure, settling) + un[:nodes.shape[0]]
    vpart = _settle(F(ens.x), phys, closure, settling) + un[nodes.shape[0]:]
    if order == 1:
        newF = _sl_step(F, F.values, F.values, vel_nodes.reshape(shape), None, g0, None, dt, 1)
        x1 = ens.x + dt * vpart
    elif order == 2:
        predF = _sl_step(F, F.values, F.values, vel_nodes.reshape(shape), None, g0, None, dt, 1)
        x_pred = ens.x + dt * vpart
        e1 = Ensemble(x_pred, ens.weights, None, ens.time + dt)
        F1 = F.with_values(predF.reshape(shape), F.time + dt)
        _check_inside(F, x_pred)
        u1, g1 = flow_of(e1)
        vel1 = _settle(F1.values.reshape(-1, 3), phys, closure, settling) + u1(nodes)
        newF = _sl_step(F, F.values, F1.values, vel_nodes.reshape(shape), vel1.reshape(shape),
                        g0, g1, dt, 2)
        x1 = ens.x + 0.5 * dt * (vpart + velocity(e1, F1, x_pred))
    else:
        raise InvalidSpecError('order must be 1 or 2')
    newF = newF.reshape(shape)
    _check_finite(newF, x1, time=ens.time + dt)
    _check_inside(F, x1)
    return Ensemble(x1, ens.weights, None, ens.time + dt), F.with_values(newF, F.time + dt)


def support_diameter(ens):
    x = ens.x[ens.weights > 0]
    if x.shape[0] < 2:
        return 0.0
    from scipy.spatial import ConvexHull
    try:
        hull = x[ConvexHull(x).vertices]
    except Exception:
        hull = x
    d = np.sqrt(((hull[:, None, :] - hull[None, :, :]) ** 2).sum(-1))
    return float(d.max())
