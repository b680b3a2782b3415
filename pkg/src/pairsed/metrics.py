"""Diagnostics: minimal distance, Wasserstein-infinity (bottleneck) distances,
interaction-sum bounds, dilution ratios, field errors and rate fitting.
"""
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching, maximum_flow
from scipy.spatial import cKDTree

from . import _fast
from .errors import InvalidSpecError

REPORT_FORMAT_VERSION = 1
_DENSE_LIMIT = 3000


def _points(p, min_count=1):
    p = np.asarray(p, dtype=float).reshape(-1, 3)
    if p.shape[0] < min_count:
        raise InvalidSpecError(f'need at least {min_count} points, got {p.shape[0]}')
    return p


def _dist(a, b):
    """Euclidean distance with a fixed evaluation order shared by every path."""
    dx = a[..., 0] - b[..., 0]
    dy = a[..., 1] - b[..., 1]
    dz = a[..., 2] - b[..., 2]
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def _dense_distances(a, b):
    return _dist(a[:, None, :], b[None, :, :])


# --- minimal distance --------------------------------------------------------

def min_distance_brute(points):
    p = _points(points, 2)
    best = np.inf
    for start in range(0, p.shape[0] - 1, 512):
        block = p[start:start + 512]
        d = _dense_distances(block, p)
        rows = np.arange(block.shape[0])
        d[rows, rows + start] = np.inf
        d[:, :start] = np.inf
        best = min(best, float(d.min()))
    return best


def min_distance(points, method='auto'):
    """min_{i != j} |x_i - x_j|, exact.

    The tree path locates all near-minimal candidate pairs with a k-d tree and
    re-evaluates them with the brute-force arithmetic, so both paths agree
    bit for bit.
    """
    p = _points(points, 2)
    if method == 'brute' or (method == 'auto' and p.shape[0] < 64):
        return min_distance_brute(p)
    if method not in ('auto', 'tree'):
        raise InvalidSpecError(f'unknown min_distance method {method!r}')
    tree = cKDTree(p)
    dnn, _ = tree.query(p, k=2)
    guess = float(dnn[:, 1].min())
    if guess == 0.0:
        return 0.0
    pairs = tree.query_pairs(guess * (1.0 + 1e-9), output_type='ndarray')
    return float(_dist(p[pairs[:, 0]], p[pairs[:, 1]]).min())


# --- bottleneck matching -----------------------------------------------------

def matching_feasible(dist, t):
    """True when the bipartite graph {d_ij <= t} has a perfect matching."""
    n = dist.shape[0]
    graph = csr_matrix(dist <= t) if isinstance(dist, np.ndarray) else dist
    match = maximum_bipartite_matching(graph, perm_type='column')
    return bool(np.all(match >= 0)) and match.size == n


def _sparse_threshold(coo, t):
    keep = coo.data <= t
    return csr_matrix((np.ones(int(keep.sum()), dtype=np.int8),
                       (coo.row[keep], coo.col[keep])), shape=coo.shape)


def w_infinity_empirical(a, b):
    """Bottleneck assignment value between two equal-size point sets.

    Binary search over the sorted distinct distances; each probe is a
    Hopcroft-Karp perfect-matching test on the thresholded graph.
    """
    a = _points(a)
    b = _points(b)
    n = a.shape[0]
    if b.shape[0] != n:
        raise InvalidSpecError(f'W-inf between empirical measures needs equal sizes ({n} vs {b.shape[0]})')
    if n <= _DENSE_LIMIT:
        d = _dense_distances(a, b)
        lo = max(d.min(axis=1).max(), d.min(axis=0).max())
        cand = np.unique(d[d >= lo])
        feas = lambda t: matching_feasible(d, t)
    else:
        ta, tb = cKDTree(a), cKDTree(b)
        lo = max(tb.query(a)[0].max(), ta.query(b)[0].max())
        hi = lo
        while True:
            coo = ta.sparse_distance_matrix(tb, hi * (1 + 1e-12), output_type='coo_matrix')
            if matching_feasible(_sparse_threshold(coo, hi * (1 + 1e-12)), hi):
                break
            hi *= 2.0
        cand = np.unique(coo.data[coo.data >= lo])
        feas = lambda t: matching_feasible(_sparse_threshold(coo, t), t)
    lo_i, hi_i = 0, cand.size - 1
    while lo_i < hi_i:
        mid = (lo_i + hi_i) // 2
        if feas(cand[mid]):
            hi_i = mid
        else:
            lo_i = mid + 1
    return float(cand[lo_i])


# --- semi-discrete estimate --------------------------------------------------

@dataclass
class WInfEstimate:
    value: float        # bottleneck transport cost from cell centres
    upper: float        # value + cell half-diagonal: an upper bound
    resolution: int
    cell_size: float

    def __float__(self):
        return self.upper


def _transport_feasible(edges_c, edges_p, n_cells, n_pts, supply, demand):
    """Max-flow check that every atom can be filled by cells within reach."""
    src = 0
    sink = n_cells + n_pts + 1
    big = int(demand * n_pts)
    rows = np.concatenate([np.zeros(n_cells, dtype=np.int64), 1 + edges_c,
                           1 + n_cells + np.arange(n_pts)])
    cols = np.concatenate([1 + np.arange(n_cells), 1 + n_cells + edges_p,
                           np.full(n_pts, sink)])
    caps = np.concatenate([supply, np.full(edges_c.size, big),
                           np.full(n_pts, demand)]).astype(np.int32)
    graph = csr_matrix((caps, (rows, cols)), shape=(sink + 1, sink + 1))
    flow = maximum_flow(graph, src, sink, method='dinic').flow_value
    return flow == big


def bottleneck_transport(sites, masses, points):
    """Smallest t such that the discrete measure sum m_c delta_{s_c} can be
    transported onto the uniform empirical measure of `points` moving mass
    by at most t.  Masses are rounded to integers with total 2^30-ish."""
    sites = _points(sites)
    points = _points(points)
    n, k = points.shape[0], sites.shape[0]
    masses = np.asarray(masses, dtype=float)
    demand = max(1, (2**30) // n)
    total = demand * n
    raw = masses / masses.sum() * total
    supply = np.floor(raw).astype(np.int64)
    short = total - int(supply.sum())
    if short:
        supply[np.argsort(-(raw - supply), kind='stable')[:short]] += 1
    ts, tp = cKDTree(sites), cKDTree(points)
    lo = max(tp.query(sites)[0].max(), ts.query(points)[0].max())
    hi = lo

    def feasible(coo, t):
        keep = coo.data <= t
        return _transport_feasible(coo.row[keep], coo.col[keep], k, n, supply, demand)

    while True:
        coo = ts.sparse_distance_matrix(tp, hi * (1 + 1e-12), output_type='coo_matrix')
        if feasible(coo, hi * (1 + 1e-12)):
            break
        hi *= 1.5
    cand = np.unique(coo.data[coo.data >= lo])
    lo_i, hi_i = 0, cand.size - 1
    while lo_i < hi_i:
        mid = (lo_i + hi_i) // 2
        if feasible(coo, cand[mid]):
            hi_i = mid
        else:
            lo_i = mid + 1
    return float(cand[lo_i])


def default_resolution(n, cells_per_spacing=3):
    return int(np.ceil(cells_per_spacing * n ** (1.0 / 3.0) * (4.0 * np.pi / 3.0) ** (-1.0 / 3.0) * 2.0))


def w_infinity_to_density(points, rho, resolution=None):
    """Estimate W-inf between the empirical measure of `points` and rho.

    rho is discretised into cell masses on a resolution^3 grid of its bounding
    box; the exact bottleneck transport between those cell masses and the
    atoms is computed by max-flow.  `value` measures from cell centres,
    `upper` adds the cell half-diagonal and bounds the true W-inf from above.
    """
    points = _points(points)
    n = points.shape[0]
    if resolution is None:
        resolution = default_resolution(n)
    centers, masses, h = rho.cell_masses(resolution)
    if centers.shape[0] < n:
        raise InvalidSpecError(
            f'resolution {resolution} too coarse: {centers.shape[0]} cells with mass for {n} points')
    value = bottleneck_transport(centers, masses, points)
    half = 0.5 * float(np.linalg.norm(h))
    return WInfEstimate(value, value + half, int(resolution), float(np.max(h)))


# --- interaction sums --------------------------------------------------------

def jo_values(points, ks):
    """max_i (1/N) sum_{j != i} d_ij^-k for each k in ks."""
    p = _points(points, 2)
    ks = np.atleast_1d(np.asarray(ks, dtype=float))
    if np.any(ks < 0) or np.any(ks > 3):
        raise InvalidSpecError('interaction exponent k must lie in [0, 3]')
    sums = _fast.inverse_power_sums(np.ascontiguousarray(p), ks)
    return sums.max(axis=0) / p.shape[0]


def jo_bound(k, d_min, rho_sup, w_inf, C=1.0):
    """C (|rho| W^3 / d^k + |rho|^(k/3)) for k < 3, log-augmented form at k = 3."""
    if k >= 3:
        return C * rho_sup * (w_inf**3 / d_min**3
                              + abs(np.log(rho_sup ** (1.0 / 3.0) * w_inf)) + 1.0)
    return C * (rho_sup * w_inf**3 / d_min**k + rho_sup ** (k / 3.0))


def jo_sums(points, k, rho_sup, w_inf, C=1.0, d_min=None):
    """(value, bound) for the interaction sum of exponent k."""
    p = _points(points, 2)
    value = float(jo_values(p, [k])[0])
    if d_min is None:
        d_min = min_distance(p)
    return value, float(jo_bound(k, d_min, rho_sup, w_inf, C))


# --- dilution report ---------------------------------------------------------

@dataclass
class DilutionReport:
    d_min: float
    w_inf: float
    ratio2: float
    ratio3: float
    xi_min: float
    xi_max: float
    flags: list = field(default_factory=list)

    def to_dict(self):
        return {'format_version': REPORT_FORMAT_VERSION, **asdict(self)}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def dilution_report(x_plus, xi, rho, resolution=None, E1=None, E2=None, M1=None, M2=None,
                    w_inf=None):
    """d_min, W-inf estimate, W^3/d^2, W^3/d^3 and xi bounds with violation flags."""
    x_plus = _points(x_plus, 2)
    d = min_distance(x_plus)
    if w_inf is None:
        w_inf = w_infinity_to_density(x_plus, rho, resolution).upper
    w = float(w_inf)
    nx = np.linalg.norm(np.asarray(xi, dtype=float).reshape(-1, 3), axis=1)
    ratio2 = w**3 / d**2 if d > 0 else np.inf
    ratio3 = w**3 / d**3 if d > 0 else np.inf
    flags = []
    if E1 is not None and ratio2 > E1:
        flags.append('ratio2>E1')
    if E2 is not None and ratio3 > E2:
        flags.append('ratio3>E2')
    if M1 is not None and nx.max() > M1:
        flags.append('xi>M1')
    if M2 is not None and nx.min() < M2:
        flags.append('xi<M2')
    return DilutionReport(float(d), w, float(ratio2), float(ratio3), float(nx.min()),
                          float(nx.max()), flags)


# --- field errors ------------------------------------------------------------

def probe_lattice(lo, hi, n_per_axis):
    axes = [np.linspace(l, h, n_per_axis) for l, h in zip(lo, hi)]
    return np.stack(np.meshgrid(*axes, indexing='ij'), -1).reshape(-1, 3)


def clear_probes(probes, centers, radius):
    """Probes farther than `radius` from every centre."""
    dist, _ = cKDTree(centers).query(probes)
    return probes[dist > radius]


def field_error_report(discrete, reference, probes):
    """(e0, e1): sup over probes of |u - u_ref| and |grad u - grad u_ref|.

    `discrete` and `reference` map an (m, 3) array of points to (u, grad).
    The caller chooses probes clear of the cutoff shells.
    """
    probes = _points(probes)
    u, g = discrete(probes)
    ur, gr = reference(probes)
    e0 = float(np.linalg.norm(u - ur, axis=1).max())
    e1 = float(np.linalg.norm((g - gr).reshape(-1, 9), axis=1).max())
    return e0, e1


# --- rates -------------------------------------------------------------------

def fit_slope(xs, ys):
    """Least-squares slope of log y against log x."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.size != ys.size or xs.size < 3:
        raise InvalidSpecError('slope fit needs at least 3 paired values')
    if np.any(xs <= 0) or np.any(ys <= 0) or not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
        raise InvalidSpecError('slope fit needs positive finite data')
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])
