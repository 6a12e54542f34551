"""Small libraries and independent oracles shared by the tests."""
import math

import numpy as np
import scipy.linalg

from mnte.geometry import Domain
from mnte.species import CrossSectionLibrary, SpatialMesh, SpeciesLayout, VelocityTable

HUGE = 1.0e6


def huge_box():
    return Domain.box((-HUGE,) * 3, (HUGE,) * 3)


def annulus_table(velocities, v_min=None, v_max=None):
    """Velocity table with equal weights summing to the annulus volume."""
    v = np.atleast_2d(np.asarray(velocities, dtype=float))
    sp = np.linalg.norm(v, axis=1)
    v_min = float(sp.min()) if v_min is None else v_min
    v_max = float(sp.max()) if v_max is None else v_max
    if v_max == v_min:
        v_min, v_max = 0.5 * v_min, 1.5 * v_max
    vol = 4.0 / 3.0 * math.pi * (v_max ** 3 - v_min ** 3)
    return VelocityTable(v, np.full(len(v), vol / len(v)), v_min, v_max)


def axis_velocities(speed=1.0):
    out = []
    for d in range(3):
        for s in (1.0, -1.0):
            v = [0.0, 0.0, 0.0]
            v[d] = s * speed
            out.append(v)
    return out


def make_library(domain, vtable, m=1, ell=1, cells=(1, 1, 1), sigma_s=0.0, sigma_f=0.0,
                 scatter_mass=None, fission_mass=None, m_yield=0.0, decay=(), n_max=4):
    """Library from per-channel masses (pi * w).

    Scalars broadcast over (species, cell, velocity).  ``scatter_mass`` has
    shape (K, K) or (m, Nc, K, K); ``fission_mass`` has shape (m, ell, K, K)
    or the full (m, ell, Nc, K, K).
    """
    lay = SpeciesLayout(m, ell)
    mesh = SpatialMesh(domain, cells)
    nc, K = mesh.n_cells, vtable.K
    w = vtable.weights
    ss = np.zeros((m, nc, K))
    sf = np.zeros((m, nc, K))
    ss[:ell] = np.broadcast_to(np.asarray(sigma_s, dtype=float), (ell, nc, K)) if np.ndim(sigma_s) < 3 \
        else np.asarray(sigma_s)[:ell]
    sf[:ell] = np.broadcast_to(np.asarray(sigma_f, dtype=float), (ell, nc, K)) if np.ndim(sigma_f) < 3 \
        else np.asarray(sigma_f)[:ell]
    if scatter_mass is None:
        scatter_mass = np.full((K, K), 1.0 / K)
    sm = np.asarray(scatter_mass, dtype=float)
    if sm.ndim == 2:
        sm = np.broadcast_to(sm, (m, nc, K, K))
    ps = np.zeros((m, nc, K, K))
    ps[:ell] = sm[:ell] / w
    pf = np.zeros((m, ell, nc, K, K))
    if fission_mass is not None:
        fm = np.asarray(fission_mass, dtype=float)
        if fm.ndim == 4:
            fm = np.broadcast_to(fm[:, :, None], (m, ell, nc, K, K))
        pf = fm / w
    my = np.zeros((m, nc, K))
    if m > ell:
        my[ell:] = np.broadcast_to(np.asarray(m_yield, dtype=float), (m - ell, nc, K)) if np.ndim(m_yield) < 3 \
            else np.asarray(m_yield)
    lam = np.zeros(m)
    lam[ell:] = decay
    return CrossSectionLibrary(lay, vtable, mesh, ss, sf, ps, pf, my, lam, n_max)


def homogeneous_oracle_library(seed=0, m=3, ell=2, K=4):
    """Random single-cell library on a huge box (boundary-free to within 1e-6)."""
    rng = np.random.default_rng(seed)
    dom = huge_box()
    vel = []
    for s in range(K):
        u = rng.normal(size=3)
        vel.append(u / np.linalg.norm(u) * (1.0 + 0.5 * (s % 2)))
    vt = annulus_table(vel, 0.5, 2.0)
    sm = rng.uniform(0.2, 1.0, size=(K, K))
    sm /= sm.sum(axis=1, keepdims=True)
    fm = np.zeros((m, ell, K, K))
    fm[:ell] = rng.uniform(0.0, 0.6, size=(ell, ell, K, K)) / K * 2
    fm[ell:] = rng.uniform(0.1, 1.0, size=(m - ell, ell, K, K))
    fm[ell:] /= fm[ell:].sum(axis=(1, 3), keepdims=True)
    return make_library(dom, vt, m=m, ell=ell, sigma_s=rng.uniform(0.5, 1.5, size=(m, 1, K)),
                        sigma_f=rng.uniform(0.2, 0.8, size=(m, 1, K)), scatter_mass=sm,
                        fission_mass=fm, m_yield=rng.uniform(0.1, 0.4, size=(m - ell, 1, K)),
                        decay=np.sort(rng.uniform(0.3, 1.5, size=m - ell)), n_max=4)


def q_matrix(lib, c=0):
    """Mean-offspring rate matrix on (species, velocity) at cell c, by explicit loops.

    (exp(tQ) g)[i, k] is the expected tally of a boundary-free population.
    """
    m, ell, K = lib.m, lib.ell, lib.K
    w = lib.vtable.weights
    Q = np.zeros((m * K, m * K))

    def ix(i, k):
        return i * K + k

    for i in range(m):
        for k in range(K):
            row = ix(i, k)
            if i < ell:
                ss = lib.sigma_s[i, c, k]
                sf = lib.sigma_f[i, c, k]
                Q[row, row] -= ss + sf
                for k2 in range(K):
                    Q[row, ix(i, k2)] += ss * lib.pi_s[i, c, k, k2] * w[k2]
                    for j in range(ell):
                        Q[row, ix(j, k2)] += sf * lib.pi_f[i, j, c, k, k2] * w[k2]
                if i == 0:
                    for j in range(ell, m):
                        Q[row, ix(j, k)] += sf * lib.m_yield[j, c, k]
            else:
                lam = lib.lambda_delay[i]
                Q[row, row] -= lam
                for j in range(ell):
                    for k2 in range(K):
                        Q[row, ix(j, k2)] += lam * lib.pi_f[i, j, c, k, k2] * w[k2]
    return Q


def oracle_value(lib, coef, i, k, t):
    """exp(tQ) g at (i, k) for a spatially constant g with coefficients coef[i, k]."""
    Q = q_matrix(lib)
    return float((scipy.linalg.expm(t * Q) @ np.asarray(coef, dtype=float).ravel())[i * lib.K + k])
