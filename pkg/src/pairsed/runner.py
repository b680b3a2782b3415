"""Experiment drivers: single runs, the converge study, the identity suite.

Every driver writes into one output directory and returns a RunManifest
listing each emitted file with its sha256.  Wall-clock times go to a
``timing.json`` sidecar that the manifest does not list, so that identical
(config, seed) pairs produce identical manifests.
"""
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import io
from .config import dump_config, parse_orientation
from .densities import parse_density
from .errors import InvalidSpecError
from .kernels import oseen_derivative, oseen_pressure, oseen_tensor
from .meso import (BlobSpec, Ensemble, FField, Physics, continuous_K_and_grad, default_blob,
                   quadrature_ensemble, sample_density, step_meso_correlated, step_meso_kinetic, support_diameter)
from .metrics import (bottleneck_transport, clear_probes, dilution_report, field_error_report,
                      fit_slope, probe_lattice, w_infinity_to_density)
from .micro import (MicroState, Monitor, _cutoff_sum, first_order_deviation, make_cloud,
                    random_orientations, run_micro)
from .pair_hydro import mobility_pair, resistance_pair, settling_velocity

CODE_VERSION = '0.1.0'


@dataclass
class RunManifest:
    mode: str
    config_hash: str
    code_version: str
    seed: int
    files: list = field(default_factory=list)
    walltime: dict = field(default_factory=dict)

    def add(self, path, root):
        rel = os.path.relpath(path, root)
        self.files.append({'path': rel, 'sha256': io.sha256_file(path),
                           'bytes': os.path.getsize(path)})

    def to_dict(self):
        return {'format_version': io.FORMAT_VERSION, 'mode': self.mode,
                'config_hash': self.config_hash, 'code_version': self.code_version,
                'seed': self.seed, 'files': sorted(self.files, key=lambda f: f['path'])}


def set_threads(n):
    import numba
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


# --- shared builders ---------------------------------------------------------

def typical_spacing(rho, n):
    """(1 / (n sup rho))^(1/3): the spacing of n points at peak density."""
    return (1.0 / (n * rho.sup)) ** (1.0 / 3.0)


def build_cloud(cfg, n, seed):
    rho = parse_density(cfg.rho0)
    F0 = parse_orientation(cfg.F0)
    return make_cloud(rho, n, cfg.r0, cfg.kappa_g, seed,
                      d_floor=cfg.d_floor * typical_spacing(rho, n), xi=F0,
                      M1=cfg.M1, M2=cfg.M2, xi_range=(cfg.xi_min, cfg.xi_max))


def build_ensemble(cfg, M, seed, with_xi):
    """Meso ensemble: M i.i.d. samples, or cell-mass quadrature nodes."""
    if cfg.meso_sampling == 'quadrature':
        ens, _ = quadrature_ensemble(parse_density(cfg.rho0), cfg.quad_resolution)
        M = ens.M
    else:
        ens = sample_density(parse_density(cfg.rho0), M, seed)
    if with_xi:
        F0 = parse_orientation(cfg.F0)
        if F0 is None:
            rng = np.random.default_rng([seed, 1])
            ens.xi = random_orientations(M, rng, cfg.xi_min, cfg.xi_max)
        else:
            ens.xi = np.asarray(F0(ens.x), dtype=float).reshape(M, 3)
    return ens


def meso_blob(cfg, ens):
    if cfg.delta is not None:
        return BlobSpec(cfg.delta)
    if cfg.meso_sampling == 'quadrature':
        lo, hi = parse_density(cfg.rho0).bounds()
        return BlobSpec(1.5 * float(np.max(hi - lo)) / cfg.quad_resolution)
    return default_blob(ens)


def drift_bound(cfg, rho):
    """Crude bound on how far characteristics travel by time T."""
    g = float(np.linalg.norm(cfg.kappa_g))
    u = 3.0 * np.pi * cfg.r0 * rho.sup * rho.radius**2
    return cfg.T * (1.75 * g + u)


def build_F_grid(cfg, rho):
    F0 = parse_orientation(cfg.F0)
    if F0 is None:
        raise InvalidSpecError('correlated runs need a deterministic F0 (constant or affine)')
    lo, hi = rho.bounds()
    pad = cfg.grid_margin + drift_bound(cfg, rho)
    return FField.from_function(F0, lo - pad, hi + pad, cfg.grid_n, order=cfg.interp_order)


def reference_field(rho, r0, kappa_g, resolution=48):
    """x -> (K rho, grad K rho): closed form if available, else cell quadrature."""
    if hasattr(rho, 'exact_K'):
        return lambda x: rho.exact_K(x, r0, kappa_g)
    centers, masses, h = rho.cell_masses(resolution)
    ens = Ensemble(centers, masses)
    blob = BlobSpec(float(np.min(h)))
    phys = Physics(r0, tuple(kappa_g))
    return lambda x: continuous_K_and_grad(ens, x, blob, phys)


def base_probes(cfg, rho, center=None):
    c = rho.center if center is None else center
    ext = cfg.probe_extent * rho.radius
    return probe_lattice(c - ext, c + ext, cfg.probe_n)


def field_probes(cfg, rho, centers, d_min, cutoff, center=None):
    """Probe lattice around `center` (default: centre of rho), clear of the cutoff shells."""
    return clear_probes(base_probes(cfg, rho, center), centers, cutoff.outer * d_min)


class CachedReference:
    """Reference field precomputed on the fixed probe lattice."""

    def __init__(self, fn, probes):
        self.probes = probes
        self.u, self.g = fn(probes)
        self._index = {p.tobytes(): i for i, p in enumerate(probes)}

    def __call__(self, x):
        idx = np.array([self._index[p.tobytes()] for p in np.asarray(x, dtype=float)])
        return self.u[idx], self.g[idx]


def _meso_steps(cfg):
    dt = cfg.meso_dt or cfg.dt
    n = int(np.ceil(cfg.T / dt - 1e-12))
    return n, cfg.T / n


def run_meso_kinetic(cfg, ens, blob, phys, record=None):
    n, dt = _meso_steps(cfg)
    for k in range(n):
        ens = step_meso_kinetic(ens, dt, blob, phys, scheme=cfg.scheme)
        if record is not None:
            record(ens)
    return ens


def run_meso_correlated(cfg, ens, F, blob, phys, record=None):
    n, dt = _meso_steps(cfg)
    for k in range(n):
        ens, F = step_meso_correlated(ens, F, dt, blob, phys, order=cfg.meso_order)
        if record is not None:
            record(ens, F)
    return ens, F


# --- mode drivers ------------------------------------------------------------

def _micro(cfg, out, manifest):
    cloud = build_cloud(cfg, cfg.N, cfg.seed)
    state = MicroState(cloud, 0.0, cfg.cutoff)
    rho = parse_density(cfg.rho0)
    monitor = Monitor(cfg.dmin_fraction, state.d_min if cloud.N > 1 else None)
    traj, final = run_micro(state, cfg.T, cfg.dt, cfg.scheme, cfg.save_every, monitor=monitor,
                            diagnostics=snapshot_proxies(state))
    files = [io.write_jsonl(os.path.join(out, 'trajectory.jsonl'), io.trajectory_records(traj)),
             io.write_trajectory_csv(os.path.join(out, 'trajectory.csv'), traj)]
    if cloud.N > 1:
        nx = np.linalg.norm(final.cloud.xi, axis=1)
        rep = {'initial': _dilution(cfg, cloud.x_plus, cloud.xi, rho).to_dict(),
               'final': {'d_min': float(final.d_min), 'xi_min': float(nx.min()),
                         'xi_max': float(nx.max())}}
        files.append(io.write_json(os.path.join(out, 'dilution.json'), rep))
    return files


def snapshot_proxies(initial):
    """Per-snapshot diagnostics.  The identity coupling bounds W_inf(mu_t, mu_0)
    by the largest centre displacement; r0/d_min tracks the dilution ratio."""
    x0 = initial.cloud.x_plus.copy()
    d0 = initial.d_min

    def extra(state):
        rec = {'w_inf_drift_bound': float(np.linalg.norm(state.cloud.x_plus - x0, axis=1).max())}
        if state.cloud.N > 1:
            d = state.d_min
            rec.update(r0_over_dmin=state.cloud.r0 / d, dmin_ratio=d / d0)
        return rec
    return extra


def _dilution(cfg, x, xi, rho):
    res = cfg.w_resolution or None
    return dilution_report(x, xi, rho, res, cfg.E1, cfg.E2, cfg.M1, cfg.M2)


def _meso_kinetic(cfg, out, manifest):
    M = cfg.N or cfg.M
    ens = build_ensemble(cfg, M, cfg.seed, with_xi=True)
    blob = meso_blob(cfg, ens)
    phys = Physics(cfg.r0, tuple(cfg.kappa_g))
    diam0 = support_diameter(ens)
    rows = [_meso_diag(ens, diam0)]
    ens = run_meso_kinetic(cfg, ens, blob, phys, record=lambda e: rows.append(_meso_diag(e, diam0)))
    return [io.write_ensemble_csv(os.path.join(out, 'ensemble_final.csv'), ens),
            io.write_jsonl(os.path.join(out, 'diagnostics.jsonl'), rows)]


def _meso_diag(ens, diam0):
    d = support_diameter(ens)
    return {'time': ens.time, 'mass': float(ens.weights.sum()), 'support_diameter': d,
            'support_growth': d / diam0 if diam0 > 0 else 1.0}


def _meso_correlated(cfg, out, manifest):
    rho = parse_density(cfg.rho0)
    M = cfg.N or cfg.M
    ens = build_ensemble(cfg, M, cfg.seed, with_xi=False)
    F = build_F_grid(cfg, rho)
    blob = meso_blob(cfg, ens)
    phys = Physics(cfg.r0, tuple(cfg.kappa_g))
    diam0 = support_diameter(ens)
    rows = [_meso_diag(ens, diam0)]
    ens, F = run_meso_correlated(cfg, ens, F, blob, phys,
                                 record=lambda e, f: rows.append(_meso_diag(e, diam0)))
    json_path, bin_path = io.write_grid(os.path.join(out, 'F_final'), F)
    return [io.write_ensemble_csv(os.path.join(out, 'ensemble_final.csv'), ens),
            io.write_jsonl(os.path.join(out, 'diagnostics.jsonl'), rows), json_path, bin_path]


RATE_COLUMNS = ['N', 'd_min', 'w_inf_0', 'e0', 'e1', 'dev_center', 'dev_orient',
                'w_inf_T', 'e0_T', 'e1_T', 'xi_err']


def replica_seeds(cfg):
    return [cfg.seed] if cfg.replicas == 1 else [[cfg.seed, r] for r in range(cfg.replicas)]


def converge_rows(cfg, on_row=None):
    """One row per N of the matched micro/meso protocol (see RATE_COLUMNS).

    t = 0 columns compare K^N on the sampled cloud with the exact K rho0;
    t = T columns compare the evolved cloud with the meso run started from
    the same rho0 and seed.  With replicas > 1 every column except N is the
    mean over independently seeded clouds.
    """
    rho = parse_density(cfg.rho0)
    phys = Physics(cfg.r0, tuple(cfg.kappa_g))
    correlated = parse_orientation(cfg.F0) is not None
    ref = CachedReference(reference_field(rho, cfg.r0, cfg.kappa_g), base_probes(cfg, rho))
    ens0 = build_ensemble(cfg, cfg.M, cfg.seed, with_xi=not correlated)
    blob = meso_blob(cfg, ens0)
    if correlated:
        meso_ens, meso_F = run_meso_correlated(cfg, ens0, build_F_grid(cfg, rho), blob, phys)
    else:
        meso_ens, meso_F = run_meso_kinetic(cfg, ens0, blob, phys), None
    meso_field = lambda x: continuous_K_and_grad(meso_ens, x, blob, phys)
    rows = []
    for n in cfg.N_list:
        reps = [_converge_replica(cfg, n, seed, rho, ref, meso_ens, meso_F, meso_field)
                for seed in replica_seeds(cfg)]
        row = [n] + [None if v[0] is None else float(np.mean(v)) for v in zip(*reps)]
        rows.append(row)
        if on_row is not None:
            on_row(rows)
    return rows


def _converge_replica(cfg, n, seed, rho, ref, meso_ens, meso_F, meso_field):
    cloud = build_cloud(cfg, n, seed)
    state = MicroState(cloud, 0.0, cfg.cutoff)
    d0 = state.d_min
    w0 = w_infinity_to_density(cloud.x_plus, rho, cfg.w_resolution or None).upper
    probes = field_probes(cfg, rho, cloud.x_plus, d0, cfg.cutoff)
    e0, e1 = field_error_report(lambda x: _cutoff_sum(state, x), ref, probes)
    dev_c, dev_o = first_order_deviation(state)
    _, final = run_micro(state, cfg.T, cfg.dt, cfg.scheme, save_every=10**9)
    xT = final.cloud.x_plus
    wT = bottleneck_transport(meso_ens.x, meso_ens.weights, xT)
    probes_T = field_probes(cfg, rho, xT, final.d_min, cfg.cutoff, center=xT.mean(axis=0))
    e0T, e1T = field_error_report(lambda x: _cutoff_sum(final, x), meso_field, probes_T)
    xi_err = None
    if meso_F is not None:
        xi_err = float(np.linalg.norm(final.cloud.xi - meso_F(xT), axis=1).max())
    return [d0, w0, e0, e1, dev_c, dev_o, wT, e0T, e1T, xi_err]


def rate_slopes(rows):
    """fit_slope of every column against N, plus the e0/W and e1/W(1+|log W|) relations.

    Returns None entries when fewer than three usable rows exist.
    """
    cols = {name: np.array([r[i] if r[i] is not None else np.nan for r in rows], dtype=float)
            for i, name in enumerate(RATE_COLUMNS)}

    def slope(x, y):
        ok = np.isfinite(x) & np.isfinite(y) & (x > 0) & (y > 0)
        return fit_slope(x[ok], y[ok]) if ok.sum() >= 3 else None

    out = {'vs_N': {name: slope(cols['N'], cols[name]) for name in RATE_COLUMNS[1:]}}
    w = cols['w_inf_0']
    out['e0_vs_w_inf'] = slope(w, cols['e0'])
    out['e1_vs_w_inf_log'] = slope(w * (1.0 + np.abs(np.log(w))), cols['e1'])
    return out


def _converge(cfg, out, manifest):
    rates = os.path.join(out, 'rates.csv')
    flush = lambda rows: io.write_csv(rates, RATE_COLUMNS, rows)
    rows = converge_rows(cfg, on_row=flush)
    flush(rows)
    slopes = io.write_json(os.path.join(out, 'slopes.json'), rate_slopes(rows))
    return [rates, slopes]


# --- kernel / matrix identity suite ---------------------------------------

def _rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _fd_stokes_residual(x, h):
    """Centred finite-difference residuals of div Phi = 0 and -lap Phi + grad P = 0."""
    e = np.eye(3) * h
    lap = sum(oseen_tensor(x + e[c]) - 2 * oseen_tensor(x) + oseen_tensor(x - e[c])
              for c in range(3)) / h**2
    gradP = np.stack([(oseen_pressure(x + e[c]) - oseen_pressure(x - e[c])) / (2 * h)
                      for c in range(3)], -1)
    div = sum((oseen_tensor(x + e[c])[..., :, c] - oseen_tensor(x - e[c])[..., :, c]) / (2 * h)
              for c in range(3))
    return max(np.abs(-lap + gradP).max(), np.abs(div).max())


def identity_checks(seed=0):
    """Oseen, pair-matrix and settling identities; list of check dicts."""
    rng = np.random.default_rng(seed)
    checks = []

    def add(name, value, tol, passed=None):
        ok = bool(value <= tol) if passed is None else bool(passed)
        checks.append({'name': name, 'value': float(value), 'tol': float(tol), 'passed': ok})

    x = rng.normal(size=(200, 3))
    x *= rng.uniform(0.2, 5.0, (200, 1)) / np.linalg.norm(x, axis=1)[:, None]
    phi = oseen_tensor(x)
    add('oseen_symmetry', np.abs(phi - np.swapaxes(phi, -1, -2)).max(), 1e-10)
    add('oseen_even', np.abs(phi - oseen_tensor(-x)).max(), 1e-10)
    lam = rng.uniform(0.1, 10.0, (200, 1))
    add('oseen_homogeneity', np.abs(oseen_tensor(lam * x) * lam[:, :, None] - phi).max(), 1e-10)
    Q = _rotation(rng)
    add('oseen_equivariance', np.abs(oseen_tensor(x @ Q.T) - Q @ phi @ Q.T).max(), 1e-10)
    d2 = oseen_derivative(x, 2)
    lap = np.einsum('nabcc->nab', d2)
    d1 = oseen_derivative(x, 1)
    r = np.linalg.norm(x, axis=1)[:, None, None]
    grad_p = (np.eye(3) / r**3 - 3 * x[:, :, None] * x[:, None, :] / r**5) / (4 * np.pi)
    add('stokes_momentum', np.abs(-lap + grad_p).max(), 1e-10)
    add('stokes_divergence', np.abs(np.einsum('nabb->na', d1)).max(), 1e-10)
    hs = np.array([0.04, 0.02, 0.01, 0.005])
    pts = x[:20]
    pts = pts / np.linalg.norm(pts, axis=1)[:, None]
    res = np.array([_fd_stokes_residual(pts, h) for h in hs])
    s = fit_slope(hs, res)
    add('fd_residual_slope', abs(s - 2.0), 0.1)

    n = np.exp(rng.uniform(np.log(1.0 + 1e-6), np.log(50.0), 1000))
    d = rng.normal(size=(1000, 3))
    xi = d / np.linalg.norm(d, axis=1)[:, None] * n[:, None]
    mob, res_p = mobility_pair(xi), resistance_pair(xi)
    I = np.eye(3)
    add('inversion_sum', np.abs((res_p.A1 + res_p.A2) @ (mob.a1 + mob.a2) - I).max(), 1e-12)
    add('inversion_cross', np.abs(res_p.A1 @ mob.a2 + res_p.A2 @ mob.a1).max(), 1e-12)
    Q = _rotation(rng)
    rot = mobility_pair(xi @ Q.T)
    add('mobility_equivariance', np.abs(rot.a2 - Q @ mob.a2 @ Q.T).max(), 1e-12)
    rres = resistance_pair(xi @ Q.T)
    add('resistance_equivariance', np.abs(rres.A2 - Q @ res_p.A2 @ Q.T).max(), 1e-12)

    g = np.array([0.0, 0.0, -1.0])
    ordered = True
    for m in (1.5, 2.0, 4.0, 8.0):
        v = -settling_velocity(np.array([0.0, 0.0, m]), g)[2]
        h_ = -settling_velocity(np.array([m, 0.0, 0.0]), g)[2]
        ordered &= v > h_ > 1.0
    add('settling_ordering', 0.0, 0.0, ordered)
    v2 = -settling_velocity(np.array([0.0, 0.0, 2.0]), g)[2]
    h2 = -settling_velocity(np.array([2.0, 0.0, 0.0]), g)[2]
    add('settling_vertical_xi2', abs(v2 - 1.375), 1e-12)
    add('settling_horizontal_xi2', abs(h2 - 1.1875), 1e-12)
    return checks


def _kernels_check(cfg, out, manifest):
    checks = identity_checks(cfg.seed)
    path = io.write_json(os.path.join(out, 'kernels_check.json'),
                         {'checks': checks, 'passed': all(c['passed'] for c in checks)})
    return [path]


DRIVERS = {'micro': _micro, 'meso_kinetic': _meso_kinetic, 'meso_correlated': _meso_correlated,
           'converge': _converge, 'kernels_check': _kernels_check}


def run(cfg, out=None):
    """Execute cfg.mode into `out` (default cfg.out); returns the manifest."""
    out = out or cfg.out
    os.makedirs(out, exist_ok=True)
    set_threads(cfg.threads)
    manifest = RunManifest(cfg.mode, cfg.digest(), CODE_VERSION, cfg.seed)
    t0 = time.time()
    echo = os.path.join(out, 'config.resolved.ini')
    with open(echo, 'w') as fh:
        fh.write(dump_config(cfg))
    files = [echo] + DRIVERS[cfg.mode](cfg, out, manifest)
    for p in files:
        manifest.add(p, out)
    t1 = time.time()
    manifest.walltime = {'start': t0, 'end': t1, 'elapsed': t1 - t0}
    with open(os.path.join(out, 'manifest.json'), 'w') as fh:
        json.dump(manifest.to_dict(), fh, sort_keys=True, indent=1)
        fh.write('\n')
    with open(os.path.join(out, 'timing.json'), 'w') as fh:
        json.dump({'format_version': io.FORMAT_VERSION, **manifest.walltime}, fh, indent=1)
        fh.write('\n')
    return manifest


def converge_study(cfg, out=None):
    """Run the converge protocol; returns (rows, slopes) and writes rates.csv."""
    if cfg.mode != 'converge':
        cfg = cfg.replace(mode='converge')
    run(cfg, out)
    header, rows = io.read_csv(os.path.join(out or cfg.out, 'rates.csv'))
    return rows, rate_slopes(rows)
