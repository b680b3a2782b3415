"""N-pair cloud dynamics driven by the first-order velocity laws.

    d x_plus^i / dt = (a1 + a2)(xi_i) kappa_g + K^N(x_plus^i)
    d xi_i / dt     = grad K^N(x_plus^i) xi_i

with K^N(x) = (6 pi r0 / N) sum_j chi(|x - x_plus^j| / d_min) Phi(x - x_plus^j) kappa_g.
"""
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _fast
from .densities import parse_density
from .errors import BlowUpError, InvalidSpecError
from .kernels import DEFAULT_CUTOFF, truncated_oseen
from .metrics import min_distance
from .pair_hydro import DEFAULT_CLOSURE, settling_velocity
from .reflections import Cloud


class DilutionWarning(UserWarning):
    """The state left the monitored assumption region (xi bounds, d_min decay)."""


@dataclass
class MicroState:
    cloud: Cloud
    time: float = 0.0
    cutoff: object = DEFAULT_CUTOFF

    @property
    def d_min(self):
        return min_distance(self.cloud.x_plus) if self.cloud.N > 1 else np.inf

    def with_positions(self, x_plus, xi, time):
        return MicroState(self.cloud.replace(x_plus=x_plus, xi=xi), time, self.cutoff)


def _cutoff_sum(state, x, d_min=None):
    c = state.cloud
    x = np.ascontiguousarray(np.asarray(x, dtype=float).reshape(-1, 3))
    if d_min is None:
        d_min = state.d_min
    if not np.isfinite(d_min):
        # a lone pair: any positive scale cuts off its own centre
        d_min = 1.0
    u, g = _fast.cutoff_oseen_sum(x, np.ascontiguousarray(c.x_plus), float(d_min),
                                  state.cutoff.inner, state.cutoff.outer, c.kappa_g)
    scale = 6.0 * np.pi * c.r0 / c.N
    return scale * u, scale * g


def discrete_K(state, x, d_min=None):
    """K^N at points x (..., 3)."""
    x = np.asarray(x, dtype=float)
    return _cutoff_sum(state, x, d_min)[0].reshape(x.shape)


def discrete_K_gradient(state, x, d_min=None):
    """grad K^N at points x, entries [.., a, b] = d u_a / d x_b."""
    x = np.asarray(x, dtype=float)
    return _cutoff_sum(state, x, d_min)[1].reshape(x.shape[:-1] + (3, 3))


def discrete_K_reference(state, x, d_min=None):
    """Plain numpy evaluation of K^N, used to cross-check the jitted sum."""
    c = state.cloud
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    d = state.d_min if d_min is None else d_min
    if not np.isfinite(d):
        d = 1.0
    t = truncated_oseen(x[:, None, :] - c.x_plus[None, :, :], d, state.cutoff)
    return 6.0 * np.pi * c.r0 / c.N * np.einsum('mjab,b->ma', t, c.kappa_g)


def first_order_velocities(state, closure=DEFAULT_CLOSURE):
    """(v_center, v_xi) per pair."""
    c = state.cloud
    u, g = _cutoff_sum(state, c.x_plus)
    v_center = settling_velocity(c.xi, c.kappa_g, closure) + u
    v_xi = np.einsum('iab,ib->ia', g, c.xi)
    return v_center, v_xi


def first_order_deviation(state, solution=None, closure=DEFAULT_CLOSURE):
    """Sup-norm gaps between the first-order laws and the reflections solve.

    Returns (centers, orientations): max_i |U_plus^i - v_center^i| and
    max_i |dx_minus^i/dt - R v_xi^i| / |x_minus^i| with dx_minus/dt = U_minus.
    """
    from .reflections import solve_reflections
    c = state.cloud
    if solution is None:
        solution = solve_reflections(c, closure=closure)
    v_center, v_xi = first_order_velocities(state, closure)
    dev_c = np.linalg.norm(solution.U_plus - v_center, axis=1).max()
    x_minus = c.R * np.linalg.norm(c.xi, axis=1)
    dev_o = (np.linalg.norm(solution.U_minus - c.R * v_xi, axis=1) / x_minus).max()
    return float(dev_c), float(dev_o)


def _rhs(state, x, xi, closure):
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(xi))):
        raise BlowUpError(f'non-finite stage state after t = {state.time:g}', time=state.time)
    s = state.with_positions(x, xi, state.time)
    return first_order_velocities(s, closure)


def step_micro(state, dt, scheme='rk4', closure=DEFAULT_CLOSURE, monitor=None):
    """Advance (x_plus, xi) by dt with explicit Euler or classical RK4."""
    if not dt > 0:
        raise InvalidSpecError('dt must be positive')
    x0, q0 = state.cloud.x_plus, state.cloud.xi
    with np.errstate(over='ignore', invalid='ignore'):
        x1, q1 = _advance(state, x0, q0, dt, scheme, closure)
    t1 = state.time + dt
    if not (np.all(np.isfinite(x1)) and np.all(np.isfinite(q1))):
        raise BlowUpError(f'non-finite state at t = {t1:g}', time=t1)
    new = state.with_positions(x1, q1, t1)
    if monitor is not None:
        monitor.check(new)
    return new


def _advance(state, x0, q0, dt, scheme, closure):
    if scheme == 'euler':
        vx, vq = _rhs(state, x0, q0, closure)
        x1, q1 = x0 + dt * vx, q0 + dt * vq
    elif scheme == 'rk4':
        k1 = _rhs(state, x0, q0, closure)
        k2 = _rhs(state, x0 + 0.5 * dt * k1[0], q0 + 0.5 * dt * k1[1], closure)
        k3 = _rhs(state, x0 + 0.5 * dt * k2[0], q0 + 0.5 * dt * k2[1], closure)
        k4 = _rhs(state, x0 + dt * k3[0], q0 + dt * k3[1], closure)
        x1 = x0 + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        q1 = q0 + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    else:
        raise InvalidSpecError(f'unknown scheme {scheme!r}')
    return x1, q1


@dataclass
class Monitor:
    """Warns when |xi| leaves [M2, M1] or d_min drops below a fraction of its start."""
    dmin_fraction: float = 0.25
    d_min0: float = None

    def check(self, state):
        c = state.cloud
        nx = np.linalg.norm(c.xi, axis=1)
        if nx.min() < c.M2 or nx.max() > c.M1:
            warnings.warn(f't={state.time:g}: |xi| in [{nx.min():.3g}, {nx.max():.3g}] '
                          f'outside [M2, M1] = [{c.M2}, {c.M1}]', DilutionWarning, stacklevel=3)
        if self.d_min0 is not None and c.N > 1:
            d = state.d_min
            if d < self.dmin_fraction * self.d_min0:
                warnings.warn(f't={state.time:g}: d_min = {d:.3g} fell below '
                              f'{self.dmin_fraction} x initial {self.d_min0:.3g}',
                              DilutionWarning, stacklevel=3)


@dataclass
class Snapshot:
    time: float
    x_plus: np.ndarray
    xi: np.ndarray
    diagnostics: dict = field(default_factory=dict)


@dataclass
class Trajectory:
    snapshots: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append(self, snap):
        if self.snapshots and not snap.time > self.snapshots[-1].time:
            raise InvalidSpecError('snapshot times must increase strictly')
        self.snapshots.append(snap)

    @property
    def final(self):
        return self.snapshots[-1]


def snapshot(state, extra=None):
    c = state.cloud
    nx = np.linalg.norm(c.xi, axis=1)
    diag = {'d_min': float(state.d_min) if c.N > 1 else None,
            'xi_min': float(nx.min()), 'xi_max': float(nx.max())}
    if extra:
        diag.update(extra(state))
    return Snapshot(state.time, c.x_plus.copy(), c.xi.copy(), diag)


def run_micro(state, T, dt, scheme='rk4', save_every=1, closure=DEFAULT_CLOSURE,
              monitor=None, diagnostics=None):
    """Integrate to time T, saving every `save_every` steps and at the end."""
    if T < 0 or not dt > 0:
        raise InvalidSpecError('need T >= 0 and dt > 0')
    traj = Trajectory(meta={'d_min_initial': float(state.d_min) if state.cloud.N > 1 else None,
                            'scheme': scheme, 'dt': dt, 'T': T})
    traj.append(snapshot(state, diagnostics))
    nsteps = int(np.ceil(T / dt - 1e-12)) if T > 0 else 0
    for k in range(nsteps):
        h = min(dt, T - state.time) if k == nsteps - 1 else dt
        state = step_micro(state, h, scheme, closure, monitor)
        if (k + 1) % save_every == 0 or k == nsteps - 1:
            traj.append(snapshot(state, diagnostics))
    return traj, state


# --- initial clouds ----------------------------------------------------------

def hardcore_sample(rho, n, rng, d_floor=0.0, max_tries=200):
    """i.i.d. draws from rho, rejecting any draw closer than d_floor to an accepted one."""
    rho = parse_density(rho)
    if d_floor <= 0:
        return rho.sample(n, rng)
    cell = d_floor
    grid = {}
    out = []
    tries = 0
    while len(out) < n:
        batch = rho.sample(max(64, n - len(out)), rng)
        for p in batch:
            key = tuple(np.floor(p / cell).astype(int))
            ok = True
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    for dz in (-1, 0, 1):
                        for q in grid.get((key[0] + dx, key[1] + dy, key[2] + dz), ()):
                            if np.sum((p - q) ** 2) < d_floor * d_floor:
                                ok = False
                                break
                        if not ok:
                            break
                    if not ok:
                        break
                if not ok:
                    break
            if ok:
                grid.setdefault(key, []).append(p)
                out.append(p)
                if len(out) == n:
                    break
        tries += 1
        if tries > max_tries * max(1, n // 64):
            raise InvalidSpecError(f'could not place {n} points with d_min >= {d_floor:g}')
    return np.array(out)


def random_orientations(n, rng, xi_min=1.5, xi_max=3.0):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1)[:, None]
    return d * rng.uniform(xi_min, xi_max, n)[:, None]


def make_cloud(rho, n, r0, kappa_g, seed, d_floor=0.0, xi=None, M1=None, M2=None,
               xi_range=(1.5, 3.0)):
    """Sample a cloud from rho.  xi may be None (random), a fixed vector, or a
    callable F0(x) giving the orientation field."""
    rng = np.random.default_rng(seed)
    x = hardcore_sample(rho, n, rng, d_floor)
    if xi is None:
        q = random_orientations(n, rng, *xi_range)
    elif callable(xi):
        q = np.asarray(xi(x), dtype=float).reshape(n, 3)
    else:
        q = np.tile(np.asarray(xi, dtype=float).reshape(1, 3), (n, 1))
    kw = {}
    if M1 is not None:
        kw['M1'] = M1
    if M2 is not None:
        kw['M2'] = M2
    return Cloud(x, q, r0, kappa_g, **kw)
