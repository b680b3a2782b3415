"""Experiment configuration: INI files with a fixed schema.

Example::

    [run]
    mode = micro
    seed = 1

    [physics]
    r0 = 0.05
    kappa_g = 0, 0, -1

    [cloud]
    N = 256
    rho0 = uniform_ball radius=1

    [time]
    dt = 0.01
    T = 0.5

Sections and keys are listed in ``SCHEMA``; see the README for meanings.
"""
import configparser
import dataclasses
import hashlib
import json
import re

import numpy as np

from .densities import parse_density
from .errors import ConfigError, InvalidSpecError

MODES = ('micro', 'meso_kinetic', 'meso_correlated', 'converge', 'kernels_check')


def _floats(text):
    return tuple(float(v) for v in re.split(r'[,\s]+', text.strip()) if v)


def _ints(text):
    return tuple(int(v) for v in re.split(r'[,\s]+', text.strip()) if v)


def _opt_float(text):
    return None if text.strip().lower() in ('', 'auto', 'none') else float(text)


# section -> key -> (field name, parser)
SCHEMA = {
    'run': {'mode': ('mode', str), 'seed': ('seed', int), 'out': ('out', str),
            'threads': ('threads', int)},
    'physics': {'r0': ('r0', float), 'kappa_g': ('kappa_g', _floats), 'M1': ('M1', float),
                'M2': ('M2', float), 'E1': ('E1', float), 'E2': ('E2', float)},
    'cloud': {'N': ('N', int), 'N_list': ('N_list', _ints), 'rho0': ('rho0', str),
              'F0': ('F0', str), 'd_floor': ('d_floor', float), 'xi_min': ('xi_min', float),
              'xi_max': ('xi_max', float), 'N_max': ('N_max', int),
              'replicas': ('replicas', int)},
    'time': {'dt': ('dt', float), 'T': ('T', float), 'scheme': ('scheme', str),
             'save_every': ('save_every', int)},
    'cutoff': {'inner': ('cutoff_inner', float), 'outer': ('cutoff_outer', float)},
    'meso': {'M': ('M', int), 'delta': ('delta', _opt_float), 'grid_n': ('grid_n', int),
             'grid_margin': ('grid_margin', float), 'order': ('meso_order', int),
             'interp_order': ('interp_order', int), 'dt': ('meso_dt', _opt_float),
             'sampling': ('meso_sampling', str), 'quad_resolution': ('quad_resolution', int)},
    'diagnostics': {'probe_n': ('probe_n', int), 'probe_extent': ('probe_extent', float),
                    'wasserstein_resolution': ('w_resolution', int),
                    'dmin_fraction': ('dmin_fraction', float),
                    'support_growth_max': ('support_growth_max', float)},
}


@dataclasses.dataclass
class ExperimentConfig:
    mode: str = 'micro'
    seed: int = 0
    out: str = 'out'
    threads: int = 1
    r0: float = None
    kappa_g: tuple = None
    M1: float = 8.0
    M2: float = 1.2
    E1: float = 1.0
    E2: float = 1.0
    N: int = None
    N_list: tuple = None
    rho0: str = 'uniform_ball radius=1'
    F0: str = 'random'
    d_floor: float = 0.5
    xi_min: float = 1.5
    xi_max: float = 3.0
    N_max: int = 10000
    replicas: int = 1
    dt: float = None
    T: float = None
    scheme: str = 'rk4'
    save_every: int = 1
    cutoff_inner: float = 0.25
    cutoff_outer: float = 0.5
    M: int = 4096
    delta: float = None
    grid_n: int = 25
    grid_margin: float = 0.5
    meso_order: int = 1
    interp_order: int = 1
    meso_dt: float = None
    meso_sampling: str = 'iid'
    quad_resolution: int = 16
    probe_n: int = 21
    probe_extent: float = 1.3
    w_resolution: int = 0
    dmin_fraction: float = 0.25
    support_growth_max: float = 3.0

    def to_dict(self):
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def digest(self):
        """sha256 of the canonical JSON form (all defaults resolved)."""
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()

    @property
    def cutoff(self):
        from .kernels import CutoffSpec
        return CutoffSpec(self.cutoff_inner, self.cutoff_outer)

    @property
    def Ns(self):
        return tuple(self.N_list) if self.N_list else (self.N,)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def _line_of(text, section, key):
    cur = None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith('[') and s.endswith(']'):
            cur = s[1:-1].strip()
        elif cur == section and re.match(rf'{re.escape(key)}\s*[=:]', s, re.IGNORECASE):
            return no
    return None


def _fail(msg, field, text=None, section=None, key=None):
    line = _line_of(text, section, key) if text is not None and section else None
    where = f' (line {line})' if line else ''
    raise ConfigError(f'{field}: {msg}{where}', field=field, line=line)


def validate(cfg, text=None, origin=None):
    """Raise ConfigError naming the first violated constraint."""
    origin = origin or {}

    def fail(field, msg):
        sec, key = origin.get(field, (None, None))
        _fail(msg, field, text, sec, key)

    if cfg.mode not in MODES:
        fail('mode', f'must be one of {", ".join(MODES)}')
    if cfg.threads < 1:
        fail('threads', 'threads >= 1')
    if cfg.mode == 'kernels_check':
        return cfg
    if cfg.r0 is None or not (np.isfinite(cfg.r0) and cfg.r0 > 0):
        fail('r0', 'r0 > 0 required')
    if cfg.kappa_g is None or len(cfg.kappa_g) != 3 or not all(np.isfinite(cfg.kappa_g)):
        fail('kappa_g', 'three finite components required')
    if not cfg.M1 > cfg.M2:
        fail('M2', 'need M1 > M2 > 1 (orientation-bound assumption)')
    if not cfg.M2 > 1:
        fail('M2', 'need M1 > M2 > 1 (orientation-bound assumption)')
    if not (cfg.E1 > 0 and cfg.E2 > 0):
        fail('E1', 'E1 > 0 and E2 > 0 required')
    if cfg.mode == 'converge':
        if not cfg.N_list:
            fail('N_list', 'converge mode needs N_list')
        Ns = cfg.N_list
    else:
        if cfg.mode in ('meso_kinetic', 'meso_correlated') and cfg.N is None:
            Ns = (cfg.M,)
        else:
            if cfg.N is None:
                fail('N', 'N >= 1')
            Ns = (cfg.N,)
    for n in Ns:
        if n < 1:
            fail('N_list' if cfg.mode == 'converge' else 'N', 'N >= 1')
        if cfg.mode != 'meso_kinetic' and cfg.mode != 'meso_correlated' and n > cfg.N_max:
            fail('N', f'N <= N_max = {cfg.N_max} (O(N^2) sums; raise N_max explicitly)')
    if cfg.M < 1:
        fail('M', 'M >= 1')
    if cfg.dt is None or not cfg.dt > 0:
        fail('dt', 'dt > 0')
    if cfg.T is None or not cfg.T > 0:
        fail('T', 'T > 0')
    if cfg.scheme not in ('rk4', 'euler'):
        fail('scheme', "scheme must be 'rk4' or 'euler'")
    if cfg.save_every < 1:
        fail('save_every', 'save_every >= 1')
    if not 0 < cfg.cutoff_inner < cfg.cutoff_outer <= 1:
        fail('cutoff_inner', 'need 0 < inner < outer <= 1')
    if cfg.delta is not None and not cfg.delta > 0:
        fail('delta', 'delta > 0 (or auto)')
    if cfg.meso_dt is not None and not cfg.meso_dt > 0:
        fail('meso_dt', 'meso dt > 0 (or auto)')
    if cfg.replicas < 1:
        fail('replicas', 'replicas >= 1')
    if cfg.meso_sampling not in ('iid', 'quadrature'):
        fail('meso_sampling', "sampling must be 'iid' or 'quadrature'")
    if cfg.quad_resolution < 2:
        fail('quad_resolution', 'quad_resolution >= 2')
    if cfg.grid_n < 4:
        fail('grid_n', 'grid_n >= 4')
    if cfg.grid_margin < 0:
        fail('grid_margin', 'grid_margin >= 0')
    if cfg.meso_order not in (1, 2):
        fail('meso_order', 'order must be 1 or 2')
    if cfg.interp_order not in (1, 3):
        fail('interp_order', 'interp_order must be 1 or 3')
    if not 1 < cfg.xi_min <= cfg.xi_max:
        fail('xi_min', 'need 1 < xi_min <= xi_max (pairs must not overlap)')
    if cfg.d_floor < 0:
        fail('d_floor', 'd_floor >= 0')
    if cfg.probe_n < 2:
        fail('probe_n', 'probe_n >= 2')
    try:
        parse_density(cfg.rho0)
    except InvalidSpecError as exc:
        fail('rho0', str(exc))
    try:
        parse_orientation(cfg.F0)
    except InvalidSpecError as exc:
        fail('F0', str(exc))
    return cfg


def parse_orientation(text):
    """Orientation spec: ``random``, ``constant xi=2,0,0`` or
    ``affine xi=2,0,0 A=a11,a12,...,a33`` (F0(x) = xi + A x).

    Returns None for random orientations, else a callable F0.
    """
    parts = str(text).split()
    if not parts:
        raise InvalidSpecError('empty orientation spec')
    kind = parts[0]
    kw = {}
    for item in parts[1:]:
        key, sep, val = item.partition('=')
        if not sep:
            raise InvalidSpecError(f'orientation parameter {item!r} is not key=value')
        kw[key] = np.array([float(v) for v in val.split(',')])
    if kind == 'random':
        return None
    xi = kw.get('xi')
    if xi is None or xi.shape != (3,):
        raise InvalidSpecError(f'{kind} orientation needs xi=x,y,z')
    if kind == 'constant':
        return lambda x: np.broadcast_to(xi, np.shape(x)).copy()
    if kind == 'affine':
        A = kw.get('A')
        if A is None or A.size != 9:
            raise InvalidSpecError('affine orientation needs A with 9 entries')
        A = A.reshape(3, 3)
        return lambda x: xi + np.asarray(x) @ A.T
    raise InvalidSpecError(f'unknown orientation spec {kind!r} (known: random, constant, affine)')


def load_config(text, overrides=None):
    """Parse INI text into a validated ExperimentConfig."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=('#', ';'))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f'parse error: key outside any section (line {exc.lineno})',
                          line=exc.lineno) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError(f'parse error (line {line}): {exc.errors[0][1].strip()}',
                          line=line) from None
    except configparser.Error as exc:
        line = getattr(exc, 'lineno', None)
        raise ConfigError(f'parse error (line {line}): {exc.message}', line=line) from None
    values = {}
    origin = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f'unknown section [{section}] (line {_line_of_section(text, section)}); '
                              f'known: {", ".join(SCHEMA)}', field=section,
                              line=_line_of_section(text, section))
        for key, raw in cp.items(section):
            spec = SCHEMA[section].get(key)
            if spec is None:
                _fail(f'unknown key in [{section}]; known: {", ".join(SCHEMA[section])}',
                      key, text, section, key)
            field, parser = spec
            try:
                values[field] = parser(raw)
            except (TypeError, ValueError):
                _fail(f'cannot parse {raw!r} as {getattr(parser, "__name__", "value")}',
                      field, text, section, key)
            origin[field] = (section, key)
    for field, val in (overrides or {}).items():
        if val is not None:
            values[field] = val
    cfg = ExperimentConfig(**values)
    return validate(cfg, text, origin)


def _line_of_section(text, section):
    for no, line in enumerate(text.splitlines(), 1):
        if line.strip() == f'[{section}]':
            return no
    return None


def parse_config(path, overrides=None):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f'cannot read config {path}: {exc.strerror}') from None
    return load_config(text, overrides)


def dump_config(cfg):
    """INI text that parses back to an equal config (defaults echoed)."""
    d = cfg.to_dict()
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f'[{section}]')
        for key, (field, _) in keys.items():
            v = d[field]
            if v is None:
                if field in ('delta', 'meso_dt'):
                    lines.append(f'{key} = auto')
                continue
            if isinstance(v, list):
                v = ', '.join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f'{key} = {v}')
        lines.append('')
    return '\n'.join(lines)
