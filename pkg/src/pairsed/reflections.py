"""Method of reflections for a cloud of sedimenting sphere pairs.

Each pair i is represented by velocity pairs (V1, V2); the flow it generates
is the far-field pair representation with drag forces from the resistance
relation.  One reflection maps the current increments to

    V'_alpha^i = - sum_{j != i} field_j[V^j](x_alpha^i),

i.e. each sphere receives the boundary correction that cancels the flow of
the other pairs' previous increments.

Mobility problem.  With gravity prescribing the forces, the strengths W of
the decomposition u = sum_i U[W^i] must carry drag forces -mg on every
sphere, so W^i = (a1 + a2) kappa_g, and the actual sphere velocities are
U = W + (fields of all other pairs at the sphere centres).  The reflection
series started from these velocities rebuilds W as sum_p V^(p); its
increments give the contraction ratios and its partial sum the force
residual reported by the solver.
"""
from dataclasses import dataclass, field

import numpy as np

from . import _fast
from .errors import InvalidSpecError, NearFieldError, NonConvergenceError, OverlapError
from .pair_hydro import (DEFAULT_CLOSURE, DEFAULT_M1, DEFAULT_M2, SIX_PI,
                         PairGeometry, pair_forces, settling_velocity)

REFINEMENTS = ('leading', 'two_stokeslet')


@dataclass
class Cloud:
    """N pairs plus the physical constants shared by all of them."""
    x_plus: np.ndarray
    xi: np.ndarray
    r0: float
    kappa_g: np.ndarray
    M1: float = DEFAULT_M1
    M2: float = DEFAULT_M2

    def __post_init__(self):
        self.x_plus = np.array(self.x_plus, dtype=float).reshape(-1, 3)
        self.xi = np.array(self.xi, dtype=float).reshape(-1, 3)
        self.kappa_g = np.array(self.kappa_g, dtype=float).reshape(3)
        if self.x_plus.shape != self.xi.shape:
            raise InvalidSpecError('x_plus and xi must have the same number of pairs')
        if self.N < 1:
            raise InvalidSpecError('a cloud needs N >= 1 pairs')
        if not (self.r0 > 0 and np.isfinite(self.r0)):
            raise InvalidSpecError('r0 must be positive')
        if not self.M1 > self.M2 > 1.0:
            raise InvalidSpecError('orientation bounds need M1 > M2 > 1')
        if not (np.all(np.isfinite(self.x_plus)) and np.all(np.isfinite(self.xi))
                and np.all(np.isfinite(self.kappa_g))):
            raise InvalidSpecError('non-finite cloud data')
        bad = np.flatnonzero(np.linalg.norm(self.xi, axis=1) <= 1.0)
        if bad.size:
            raise OverlapError(f'pairs {bad.tolist()} have |xi| <= 1', pairs=bad.tolist())

    @property
    def N(self):
        return self.x_plus.shape[0]

    @property
    def R(self):
        return self.r0 / (2.0 * self.N)

    @property
    def mg(self):
        return SIX_PI * self.R * self.kappa_g

    @property
    def x1(self):
        return self.x_plus + self.R * self.xi

    @property
    def x2(self):
        return self.x_plus - self.R * self.xi

    @property
    def pairs(self):
        return [PairGeometry(c, x, self.R) for c, x in zip(self.x_plus, self.xi)]

    def replace(self, **kw):
        args = dict(x_plus=self.x_plus, xi=self.xi, r0=self.r0, kappa_g=self.kappa_g,
                    M1=self.M1, M2=self.M2)
        args.update(kw)
        return Cloud(**args)


@dataclass
class ReflectionSolution:
    """Converged reflections for a cloud.

    U1, U2   actual sphere velocities
    W1, W2   strengths sum_p V^(p) of the decomposition (the U^infinity)
    F1, F2   drag forces carried by the strengths
    """
    U1: np.ndarray
    U2: np.ndarray
    W1: np.ndarray
    W2: np.ndarray
    F1: np.ndarray
    F2: np.ndarray
    increments: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    force_residual: float = 0.0
    refinement: str = 'leading'

    @property
    def U_plus(self):
        return 0.5 * (self.U1 + self.U2)

    @property
    def U_minus(self):
        return 0.5 * (self.U1 - self.U2)


def _sources(cloud, F1, F2, refinement):
    n = cloud.N
    owners = np.arange(n)
    if refinement == 'leading':
        return cloud.x_plus, owners, cloud.x_plus, F1 + F2
    if refinement == 'two_stokeslet':
        src = np.concatenate([cloud.x1, cloud.x2])
        own = np.concatenate([owners, owners])
        ctr = np.concatenate([cloud.x_plus, cloud.x_plus])
        return src, own, ctr, np.concatenate([F1, F2])
    raise InvalidSpecError(f'unknown refinement {refinement!r}')


def _field_at(cloud, F1, F2, targets, owners, refinement):
    """-sum_{j != owner} Phi(t - s) f_s with the validity check of the far-field form."""
    src, s_own, s_ctr, f = _sources(cloud, F1, F2, refinement)
    u, near = _fast.stokeslet_sum(np.ascontiguousarray(targets), owners.astype(np.int64),
                                  np.ascontiguousarray(src), s_own.astype(np.int64),
                                  np.ascontiguousarray(s_ctr), np.ascontiguousarray(f))
    limit = 4.0 * cloud.M1 * cloud.R
    bad = np.flatnonzero(near <= limit)
    if bad.size:
        raise NearFieldError(
            f'targets {bad.tolist()[:10]} lie within 4*M1*R = {limit:g} of another pair',
            pairs=bad.tolist())
    return -u


def _sphere_targets(cloud):
    owners = np.arange(cloud.N)
    return np.concatenate([cloud.x1, cloud.x2]), np.concatenate([owners, owners])


def reflect_step(cloud, V1, V2, refinement='leading', closure=DEFAULT_CLOSURE):
    """One reflection: V'_alpha^i = -sum_{j != i} field_j[V^j](x_alpha^i)."""
    V1 = np.asarray(V1, dtype=float).reshape(-1, 3)
    V2 = np.asarray(V2, dtype=float).reshape(-1, 3)
    if not (np.all(np.isfinite(V1)) and np.all(np.isfinite(V2))):
        raise InvalidSpecError('non-finite reflection increments')
    n = cloud.N
    if n == 1:
        return np.zeros_like(V1), np.zeros_like(V2)
    forces = pair_forces(cloud.xi, V1, V2, cloud.R, closure)
    targets, owners = _sphere_targets(cloud)
    out = -_field_at(cloud, forces.F1, forces.F2, targets, owners, refinement)
    return out[:n], out[n:]


def ambient_field(cloud, F1, F2, x, exclude=None, refinement='leading'):
    """Superposed far fields of all pairs except `exclude`, at points x (..., 3).

    F1, F2 are per-pair drag forces, e.g. those of a ReflectionSolution.
    """
    x = np.asarray(x, dtype=float)
    pts = x.reshape(-1, 3)
    owner = -1 if exclude is None else int(exclude)
    owners = np.full(pts.shape[0], owner, dtype=np.int64)
    return _field_at(cloud, np.asarray(F1, float), np.asarray(F2, float), pts, owners,
                     refinement).reshape(x.shape)


def isolated_velocities(cloud, closure=DEFAULT_CLOSURE):
    """(a1 + a2) kappa_g per pair: the velocity with drag -mg on both spheres."""
    return settling_velocity(cloud.xi, cloud.kappa_g, closure)


def mobility_velocities(cloud, refinement='leading', closure=DEFAULT_CLOSURE):
    """Sphere velocities U = W + sum_{j != i} field_j[W^j] with W isolated."""
    W = isolated_velocities(cloud, closure)
    if cloud.N == 1:
        return W.copy(), W.copy()
    forces = pair_forces(cloud.xi, W, W, cloud.R, closure)
    targets, owners = _sphere_targets(cloud)
    amb = _field_at(cloud, forces.F1, forces.F2, targets, owners, refinement)
    n = cloud.N
    return W + amb[:n], W + amb[n:]


def force_residual(cloud, U1, U2, W1, W2, refinement='leading', closure=DEFAULT_CLOSURE):
    """max_i (|F1^i + mg| + |F2^i + mg|) / |mg| with forces recomputed from
    the velocities relative to the ambient flow of the other pairs' strengths."""
    n = cloud.N
    if n > 1:
        fw = pair_forces(cloud.xi, W1, W2, cloud.R, closure)
        targets, owners = _sphere_targets(cloud)
        amb = _field_at(cloud, fw.F1, fw.F2, targets, owners, refinement)
        rel1, rel2 = U1 - amb[:n], U2 - amb[n:]
    else:
        rel1, rel2 = U1, U2
    f = pair_forces(cloud.xi, rel1, rel2, cloud.R, closure)
    mg = cloud.mg
    scale = np.linalg.norm(mg)
    res = np.linalg.norm(f.F1 + mg, axis=1) + np.linalg.norm(f.F2 + mg, axis=1)
    return float(res.max() / scale) if scale > 0 else float(res.max())


def solve_reflections(cloud, tol=1e-10, max_iter=200, refinement='leading',
                      closure=DEFAULT_CLOSURE):
    """Velocities of all spheres under gravity, with the reflection series
    that certifies them (ratios, increments, force residual)."""
    if not tol > 0:
        raise InvalidSpecError('tol must be positive')
    U1, U2 = mobility_velocities(cloud, refinement, closure)
    W1, W2 = U1.copy(), U2.copy()
    V1, V2 = U1, U2
    scale = np.linalg.norm(cloud.kappa_g)
    prev = max(np.abs(V1).max(), np.abs(V2).max())
    increments, ratios = [prev], []
    converged = cloud.N == 1 or prev == 0.0
    it = 0
    while not converged:
        if it >= max_iter:
            raise NonConvergenceError(
                f'reflections did not reach tol={tol:g} in {max_iter} iterations', ratios)
        V1, V2 = reflect_step(cloud, V1, V2, refinement, closure)
        it += 1
        cur = max(np.abs(V1).max(), np.abs(V2).max())
        ratio = cur / prev
        ratios.append(ratio)
        increments.append(cur)
        if ratio >= 1.0:
            raise NonConvergenceError(
                f'reflection increments stopped contracting (ratio {ratio:.3g}); '
                'the cloud is not dilute enough', ratios)
        W1 += V1
        W2 += V2
        prev = cur
        converged = cur < tol * scale or cur == 0.0
    forces = pair_forces(cloud.xi, W1, W2, cloud.R, closure)
    res = force_residual(cloud, U1, U2, W1, W2, refinement, closure)
    return ReflectionSolution(U1, U2, W1, W2, forces.F1, forces.F2, increments, ratios,
                              it, True, res, refinement)


def contraction_ratio(sol):
    """Largest ratio of consecutive increment norms.

    Accepts a ReflectionSolution or a plain sequence of increment norms.
    """
    inc = np.asarray(sol.increments if hasattr(sol, 'increments') else sol, dtype=float)
    if inc.size < 2:
        raise InvalidSpecError('contraction ratio needs at least two recorded increments')
    with np.errstate(divide='ignore', invalid='ignore'):
        ratios = np.where(inc[:-1] > 0, inc[1:] / inc[:-1], 0.0)
    return float(ratios.max())
