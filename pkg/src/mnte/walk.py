"""Single weighted walker: jumps at rate alpha by the collapsed law pi, weight exp(int beta).

The expectation of weight * g(final state), killed on leaving D, reproduces
the branching-process mean without simulating any population.
"""
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import tracking
from .rng import draw_exp1, draw_index, draw_u01, mix64, stream_key
from .tally import TallyFunction, check_t_grid, run_batches, summarize
from .geometry import DomainError
from .branching import Particle

WEIGHT_SLACK = 1e-9


class UnsupportedScenario(ValueError):
    """The requested check needs a tabulable (single-cell, boundary-free) scenario."""


@dataclass(frozen=True)
class WalkState:
    species: int
    r: np.ndarray
    k: int
    log_weight: float = 0.0
    alive: bool = True
    t: float = 0.0


def _jump(cdf_row, K, u):
    idx = draw_index(cdf_row, u)
    return idx // K, idx % K


def step_walk(state, collapsed, domain, rng):
    """One jump of the walker (or its death on leaving the domain)."""
    if not state.alive:
        return state
    i, k = state.species, state.k
    mesh = collapsed.mesh
    K = collapsed.vtable.K
    v = np.array(collapsed.vtable.velocities[k])
    r = np.asarray(state.r, dtype=float)
    if not domain.contains(r):
        raise DomainError(f"walker at {r.tolist()} is outside the domain")
    cell = np.zeros(3, dtype=np.int64)
    c = tracking.locate_nb(mesh.lo, mesh.h, mesh.shape_array, r[0], r[1], r[2], v[0], v[1], v[2], cell)
    if i >= collapsed.layout.ell:
        a = collapsed.alpha[i, c, k]
        hold = rng.exponential() / a if a > 0 else np.inf
        lw = state.log_weight + collapsed.beta[i, c, k] * hold
        pos = r.copy()
    else:
        res = np.empty(4)
        tracking.flight_nb(domain.kind, domain.param_array, mesh.lo, mesh.h, mesh.shape_array,
                           r, v, cell, collapsed.alpha, collapsed.beta, i, k, np.inf,
                           rng.exponential(), res)
        hold = float(res[0])
        lw = state.log_weight + float(res[3])
        pos = r + hold * v
        if res[1] != tracking.EVENT:
            return WalkState(i, pos, k, lw, False, state.t + hold)
        c = int(res[2])
    if not np.isfinite(hold):
        return WalkState(i, pos, k, lw, True, np.inf)
    cdf = np.cumsum(collapsed.pi[i, :, c, k, :] * collapsed.vtable.weights)
    j, k2 = _jump(cdf, K, rng.uniform())
    return WalkState(int(j), pos, int(k2), lw, True, state.t + hold)


@njit(cache=True, nogil=True)
def _weighted_tally(out, p, t_grid, s, e, inclusive, logw, pos, vel, cell, i, k,
                    kind, prm, mlo, mh, mn, alpha, beta, delayed,
                    gk, gcoef, gvals, glo, gh, gn, gbox, scratch_cell, res):
    for j in range(t_grid.shape[0]):
        tj = t_grid[j]
        if tj < s:
            continue
        if tj > e or (tj == e and not inclusive):
            break
        dt = tj - s
        if dt == 0.0:
            acc = 0.0
        elif delayed:
            c = cell[0] + mn[0] * (cell[1] + mn[1] * cell[2])
            acc = beta[i, c, k] * dt
        else:
            scratch_cell[0] = cell[0]
            scratch_cell[1] = cell[1]
            scratch_cell[2] = cell[2]
            tracking.flight_nb(kind, prm, mlo, mh, mn, pos, vel, scratch_cell, alpha, beta, i, k,
                               dt, np.inf, res)
            acc = res[3]
        gv = tracking.g_eval(gk, gcoef, gvals, glo, gh, gn, gbox, i, k,
                             pos[0] + vel[0] * dt, pos[1] + vel[1] * dt, pos[2] + vel[2] * dt)
        out[p, j] += math.exp(logw + acc) * gv


@njit(cache=True, nogil=True)
def walk_kernel(start, stop, out, status, seed, src_i, src_pos, src_k, t_grid,
                kind, prm, mlo, mh, mn, vel, alpha, beta, jcdf, ell, beta_bar,
                gk, gcoef, gvals, glo, gh, gn, gbox):
    T = t_grid[t_grid.shape[0] - 1]
    K = vel.shape[0]
    zero_vel = np.zeros(3)
    ctr = np.zeros(1, dtype=np.uint64)
    pos = np.empty(3)
    start_pos = np.empty(3)
    cell = np.empty(3, dtype=np.int64)
    start_cell = np.empty(3, dtype=np.int64)
    scratch = np.empty(3, dtype=np.int64)
    res = np.empty(4)
    res2 = np.empty(4)
    for p in range(start, stop):
        key = stream_key(seed, p)
        ctr[0] = 0
        i = src_i
        k = src_k
        pos[:] = src_pos
        v0 = vel[k]
        tracking.locate_nb(mlo, mh, mn, pos[0], pos[1], pos[2], v0[0], v0[1], v0[2], cell)
        s = 0.0
        logw = 0.0
        while True:
            if i >= ell:
                c = cell[0] + mn[0] * (cell[1] + mn[1] * cell[2])
                a = alpha[i, c, k]
                e = s + draw_exp1(key, ctr) / a if a > 0.0 else np.inf
                if e > T:
                    _weighted_tally(out, p, t_grid, s, np.inf, True, logw, pos, zero_vel, cell, i, k,
                                    kind, prm, mlo, mh, mn, alpha, beta, True,
                                    gk, gcoef, gvals, glo, gh, gn, gbox, scratch, res2)
                    break
                _weighted_tally(out, p, t_grid, s, e, False, logw, pos, zero_vel, cell, i, k,
                                kind, prm, mlo, mh, mn, alpha, beta, True,
                                gk, gcoef, gvals, glo, gh, gn, gbox, scratch, res2)
                logw += beta[i, c, k] * (e - s)
            else:
                v = vel[k]
                start_pos[:] = pos
                start_cell[:] = cell
                tracking.flight_nb(kind, prm, mlo, mh, mn, pos, v, cell, alpha, beta, i, k,
                                   T - s, draw_exp1(key, ctr), res)
                outcome = int(res[1])
                # s + (T - s) can round below T and miss the last tally time
                e = T if outcome == tracking.CENSUS else s + res[0]
                _weighted_tally(out, p, t_grid, s, e, outcome == tracking.CENSUS, logw, start_pos, v,
                                start_cell, i, k, kind, prm, mlo, mh, mn, alpha, beta, False,
                                gk, gcoef, gvals, glo, gh, gn, gbox, scratch, res2)
                if outcome != tracking.EVENT:
                    break
                logw += res[3]
                pos[0] += v[0] * res[0]
                pos[1] += v[1] * res[0]
                pos[2] += v[2] * res[0]
                c = int(res[2])
            if logw > beta_bar * e + WEIGHT_SLACK * (1.0 + abs(beta_bar * e)):
                status[p] = 2
            s = e
            idx = draw_index(jcdf[i, c, k], draw_u01(key, ctr))
            i = idx // K
            k = idx % K


def _check_source(collapsed, domain, source):
    if not 0 <= source.species < collapsed.layout.m:
        raise IndexError(f"source species {source.species} out of range")
    if not 0 <= source.k < collapsed.vtable.K:
        raise IndexError(f"source velocity index {source.k} out of range")
    if not domain.contains(source.r):
        raise DomainError(f"source at {np.asarray(source.r).tolist()} is outside the domain")


def estimate_phi_series(collapsed, domain, g, source, t_grid, n_paths, seed, workers=1,
                        return_samples=False):
    """Estimates of phi_t[g](source) for every t in an increasing grid, from one set of walks."""
    t_grid = check_t_grid(t_grid)
    _check_source(collapsed, domain, source)
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    if collapsed.mesh.domain != domain:
        raise ValueError("collapsed kernel was built for a different domain")
    mesh = collapsed.mesh
    jcdf = np.ascontiguousarray(np.cumsum(collapsed.jump_masses(), axis=-1))
    r0 = np.zeros(3) + np.asarray(source.r, dtype=float)
    args = (np.uint64(seed), int(source.species), r0, int(source.k), t_grid,
            domain.kind, domain.param_array, mesh.lo, mesh.h, mesh.shape_array,
            np.ascontiguousarray(collapsed.vtable.velocities),
            np.ascontiguousarray(collapsed.alpha), np.ascontiguousarray(collapsed.beta),
            jcdf, collapsed.layout.ell, max(collapsed.beta_bar, 0.0)) + g.packed()
    out, status = run_batches(walk_kernel, int(n_paths), len(t_grid), workers, args)
    if status.any():
        raise AssertionError("walker weight exceeded exp(beta_bar * t)")
    est = summarize(out, t_grid)
    return (est, out) if return_samples else est


def estimate_phi(collapsed, domain, g, source, t, n_paths, seed, workers=1):
    """Monte Carlo estimate of phi_t[g] at the source state."""
    return estimate_phi_series(collapsed, domain, g, source, [t], n_paths, seed, workers)[0]


def derive_seed(seed, tag):
    return int(mix64(np.uint64(seed) ^ mix64(np.uint64(tag) + np.uint64(0x5851F42D4C957F2D)))) >> 1


@dataclass(frozen=True)
class SemigroupCheck:
    direct: float
    composed: float
    stderr: float
    z: float
    passed: bool


def check_semigroup_phi(collapsed, domain, g, source, s, t, n_paths, seed, inner=None, workers=1):
    """z-test of phi_{s+t}[g] against phi_s[phi_t[g]] with phi_t[g] tabulated per (j, k).

    ``inner`` optionally supplies a different kernel for the tabulated leg,
    which is how the test is shown to detect an inconsistent potential.
    """
    if collapsed.mesh.n_cells != 1 or g.kind != "constant":
        raise UnsupportedScenario("semigroup composition needs a single-cell library and a "
                                  "spatially constant g")
    inner = collapsed if inner is None else inner
    direct = estimate_phi(collapsed, domain, g, source, s + t, n_paths, seed, workers)
    if s == 0:
        return SemigroupCheck(direct.mean, direct.mean, 0.0, 0.0, True)
    m, K = collapsed.layout.m, collapsed.vtable.K
    h = np.zeros((m, K))
    h_se = np.zeros((m, K))
    for j in range(m):
        for k in range(K):
            src = Particle(j, source.r, k)
            est = estimate_phi(inner, domain, g, src, t, n_paths, derive_seed(seed, 1 + j * K + k), workers)
            h[j, k] = est.mean
            h_se[j, k] = est.stderr
    outer = estimate_phi(collapsed, domain, TallyFunction.table(h), source, s, n_paths,
                         derive_seed(seed, 0), workers)
    # sensitivity of the composed value to each tabulated entry
    weights = np.zeros((m, K))
    unit = np.zeros((m, K))
    for j in range(m):
        for k in range(K):
            unit[:] = 0.0
            unit[j, k] = 1.0
            weights[j, k] = estimate_phi(collapsed, domain, TallyFunction.table(unit.copy()), source, s,
                                         max(n_paths // 10, 100), derive_seed(seed, 10_000 + j * K + k),
                                         workers).mean
    var = direct.stderr ** 2 + outer.stderr ** 2 + float(np.sum(weights ** 2 * h_se ** 2))
    se = math.sqrt(var)
    z = (direct.mean - outer.mean) / se if se > 0 else 0.0
    return SemigroupCheck(direct.mean, outer.mean, se, z, abs(z) <= 3.0)
