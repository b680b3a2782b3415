"""Jitted O(N^2) kernel sums.

These loops are the hot spots of every simulation.  The numpy reference
implementations in the public modules are kept for cross-checks in tests.
"""
import os

import numba
import numpy as np
from numba import njit, prange

# the TBB layer shipped with some distributions is too old and warns on first use
if 'NUMBA_THREADING_LAYER' not in os.environ:
    numba.config.THREADING_LAYER = 'workqueue'

INV_8PI = 1.0 / (8.0 * np.pi)


@njit(parallel=True, cache=True)
def stokeslet_sum(targets, t_owner, sources, s_owner, s_center, forces):
    """u(t) = sum_{s: owner(s) != owner(t)} Phi(t - s) f_s.

    Also returns, per target, the smallest distance to the centre of any
    contributing pair (used for validity checks of the far-field form).
    """
    m = targets.shape[0]
    ns = sources.shape[0]
    out = np.zeros((m, 3))
    near = np.full(m, np.inf)
    for i in prange(m):
        tx = targets[i, 0]
        ty = targets[i, 1]
        tz = targets[i, 2]
        ux = 0.0
        uy = 0.0
        uz = 0.0
        md = np.inf
        for s in range(ns):
            if s_owner[s] == t_owner[i]:
                continue
            rx = tx - sources[s, 0]
            ry = ty - sources[s, 1]
            rz = tz - sources[s, 2]
            r2 = rx * rx + ry * ry + rz * rz
            r = np.sqrt(r2)
            inv_r = 1.0 / r
            inv_r3 = inv_r / r2
            fx = forces[s, 0]
            fy = forces[s, 1]
            fz = forces[s, 2]
            rf = (rx * fx + ry * fy + rz * fz) * inv_r3
            ux += fx * inv_r + rf * rx
            uy += fy * inv_r + rf * ry
            uz += fz * inv_r + rf * rz
            cx = tx - s_center[s, 0]
            cy = ty - s_center[s, 1]
            cz = tz - s_center[s, 2]
            dc = np.sqrt(cx * cx + cy * cy + cz * cz)
            if dc < md:
                md = dc
        out[i, 0] = ux * INV_8PI
        out[i, 1] = uy * INV_8PI
        out[i, 2] = uz * INV_8PI
        near[i] = md
    return out, near


@njit(parallel=True, cache=True)
def cutoff_oseen_sum(targets, centers, d_min, inner, outer, g):
    """sum_j chi(|t - c_j| / d_min) Phi(t - c_j) g and its gradient.

    Gradient convention: grad[i, a, b] = d u_a / d x_b.
    """
    m = targets.shape[0]
    n = centers.shape[0]
    u = np.zeros((m, 3))
    grad = np.zeros((m, 3, 3))
    r_in = inner * d_min
    width = outer - inner
    gx = g[0]
    gy = g[1]
    gz = g[2]
    for i in prange(m):
        acc = np.zeros(3)
        jac = np.zeros((3, 3))
        y = np.zeros(3)
        gv = np.zeros(3)
        gv[0] = gx
        gv[1] = gy
        gv[2] = gz
        for j in range(n):
            y[0] = targets[i, 0] - centers[j, 0]
            y[1] = targets[i, 1] - centers[j, 1]
            y[2] = targets[i, 2] - centers[j, 2]
            r2 = y[0] * y[0] + y[1] * y[1] + y[2] * y[2]
            r = np.sqrt(r2)
            if r <= r_in:
                continue
            t = (r / d_min - inner) / width
            if t >= 1.0:
                chi = 1.0
                dchi = 0.0
            else:
                chi = t * t * (3.0 - 2.0 * t)
                dchi = 6.0 * t * (1.0 - t) / width / d_min
            inv_r = 1.0 / r
            inv_r3 = inv_r / r2
            inv_r5 = inv_r3 / r2
            yg = y[0] * gx + y[1] * gy + y[2] * gz
            for a in range(3):
                phig = gv[a] * inv_r + y[a] * yg * inv_r3
                acc[a] += chi * phig
                for b in range(3):
                    d = (-gv[a] * y[b] + y[a] * gv[b]) * inv_r3 \
                        - 3.0 * y[a] * y[b] * yg * inv_r5
                    if a == b:
                        d += yg * inv_r3
                    jac[a, b] += chi * d + phig * dchi * y[b] * inv_r
        for a in range(3):
            u[i, a] = acc[a] * INV_8PI
            for b in range(3):
                grad[i, a, b] = jac[a, b] * INV_8PI
    return u, grad


@njit(parallel=True, cache=True)
def blob_oseen_sum(targets, sources, weights, delta, g):
    """sum_k w_k Phi_delta(t - x_k) g and its gradient, |x| -> sqrt(|x|^2 + delta^2)."""
    m = targets.shape[0]
    n = sources.shape[0]
    u = np.zeros((m, 3))
    grad = np.zeros((m, 3, 3))
    d2 = delta * delta
    gx = g[0]
    gy = g[1]
    gz = g[2]
    for i in prange(m):
        acc = np.zeros(3)
        jac = np.zeros((3, 3))
        y = np.zeros(3)
        gv = np.zeros(3)
        gv[0] = gx
        gv[1] = gy
        gv[2] = gz
        for k in range(n):
            w = weights[k]
            y[0] = targets[i, 0] - sources[k, 0]
            y[1] = targets[i, 1] - sources[k, 1]
            y[2] = targets[i, 2] - sources[k, 2]
            s2 = y[0] * y[0] + y[1] * y[1] + y[2] * y[2] + d2
            s = np.sqrt(s2)
            inv_s = w / s
            inv_s3 = inv_s / s2
            inv_s5 = inv_s3 / s2
            yg = y[0] * gx + y[1] * gy + y[2] * gz
            for a in range(3):
                acc[a] += gv[a] * inv_s + y[a] * yg * inv_s3
                for b in range(3):
                    d = (-gv[a] * y[b] + y[a] * gv[b]) * inv_s3 \
                        - 3.0 * y[a] * y[b] * yg * inv_s5
                    if a == b:
                        d += yg * inv_s3
                    jac[a, b] += d
        for a in range(3):
            u[i, a] = acc[a] * INV_8PI
            for b in range(3):
                grad[i, a, b] = jac[a, b] * INV_8PI
    return u, grad


@njit(parallel=True, cache=True)
def inverse_power_sums(points, powers):
    """S[i, q] = sum_{j != i} |x_i - x_j|^(-powers[q])."""
    n = points.shape[0]
    nq = powers.shape[0]
    out = np.zeros((n, nq))
    for i in prange(n):
        for j in range(n):
            if j == i:
                continue
            dx = points[i, 0] - points[j, 0]
            dy = points[i, 1] - points[j, 1]
            dz = points[i, 2] - points[j, 2]
            d = np.sqrt(dx * dx + dy * dy + dz * dz)
            for q in range(nq):
                out[i, q] += d ** (-powers[q])
    return out
