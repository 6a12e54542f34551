"""Branching Monte Carlo for the multi-species neutron branching process.

Each path starts from one particle and is simulated event by event.  Pending
particles live on a depth-first stack; every particle alive at a tally time
contributes g(i, r, k) to that path's tally.
"""
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import tracking
from .rng import CounterRNG, draw_exp1, draw_index, draw_u01, stream_key
from .species import StructuralError
from .tally import check_t_grid, run_batches, summarize

DEFAULT_CAP = 10_000_000

SCATTER, FISSION, DECAY, BOUNDARY_EXIT = "Scatter", "Fission", "Decay", "BoundaryExit"


class PopulationCapError(RuntimeError):
    """The particle count of one path went past the hard cap."""

    def __init__(self, cap):
        super().__init__(f"supercritical blow-up: population exceeded the cap of {cap} particles")
        self.cap = cap


@dataclass
class Particle:
    species: int
    r: np.ndarray
    k: int
    delayed: bool = False

    def __post_init__(self):
        self.r = np.zeros(3) + np.asarray(self.r, dtype=float)

    @property
    def kind(self):
        return "delayed-holder" if self.delayed else "prompt"


@dataclass
class Population:
    time: float
    particles: list = field(default_factory=list)

    def __len__(self):
        return len(self.particles)

    def counts(self, m):
        n = np.zeros(m, dtype=np.int64)
        for p in self.particles:
            n[p.species] += 1
        return n


def _check_library_domain(lib, domain):
    if lib.mesh.domain != domain:
        raise StructuralError("library mesh was built for a different domain")


def make_particle(lib, species, r, k):
    return Particle(int(species), r, int(k), delayed=not lib.layout.is_prompt(species))


# ---------------------------------------------------------------- single steps

def sample_event(particle, lib, domain, rng):
    """Time to the next event of one particle and its kind."""
    i, k = particle.species, particle.k
    if particle.delayed:
        return rng.exponential() / lib.lambda_delay[i], DECAY
    r = particle.r
    v = lib.vtable.velocities[k]
    if not domain.contains(r):
        from .geometry import DomainError
        raise DomainError(f"particle at {r.tolist()} is outside the domain")
    mesh = lib.mesh
    cell = np.zeros(3, dtype=np.int64)
    tracking.locate_nb(mesh.lo, mesh.h, mesh.shape_array, r[0], r[1], r[2], v[0], v[1], v[2], cell)
    rate = lib.event_rates()
    res = np.empty(4)
    tracking.flight_nb(domain.kind, domain.param_array, mesh.lo, mesh.h, mesh.shape_array,
                       r, np.array(v), cell, rate, rate, i, k, np.inf, rng.exponential(), res)
    if res[1] != tracking.EVENT:
        return float(res[0]), BOUNDARY_EXIT
    c = int(res[2])
    if rng.uniform() * rate[i, c, k] < lib.sigma_s[i, c, k]:
        return float(res[0]), SCATTER
    return float(res[0]), FISSION


def scatter(particle, lib, rng):
    """New velocity drawn from the weighted scatter row at the particle's cell."""
    i, k = particle.species, particle.k
    c = lib.mesh.locate(particle.r, lib.vtable.velocities[k])
    mass = lib.pi_s[i, c, k] * lib.vtable.weights
    if abs(mass.sum() - 1.0) > 1e-12:
        raise ValueError(f"scatter row at (i={i}, c={c}, k={k}) has mass {mass.sum():.17g}, not 1")
    k2 = draw_index(np.cumsum(mass), rng.uniform())
    return Particle(i, particle.r.copy(), int(k2), particle.delayed)


def _count(mu, rng):
    n = int(math.floor(mu))
    frac = mu - n
    if frac > 0.0 and rng.uniform() < frac:
        n += 1
    return n


def fission(particle, lib, rng):
    """Offspring of a fission (prompt parent) or decay (delayed holder).

    Each (type, velocity) channel gets floor(mu) + Bernoulli(mu - floor(mu))
    particles, independently across channels.
    """
    i, k = particle.species, particle.k
    c = lib.mesh.locate(particle.r, lib.vtable.velocities[k])
    fm = lib.fission_masses()
    kids = []
    for j in range(lib.ell):
        for k2 in range(lib.K):
            mu = fm[i, j, c, k, k2]
            if mu > lib.n_max:
                raise ValueError(f"channel mean {mu} exceeds n_max = {lib.n_max}")
            if mu > 0.0:
                for _ in range(_count(mu, rng)):
                    kids.append(Particle(j, particle.r.copy(), k2, False))
    if i == 0 and not particle.delayed:
        for j in lib.layout.delayed:
            mu = lib.m_yield[j, c, k]
            if mu > 0.0:
                for _ in range(_count(mu, rng)):
                    kids.append(Particle(j, particle.r.copy(), k, True))
    return kids


def simulate_population(initial, lib, domain, t, rng, cap=DEFAULT_CAP):
    """Evolve a population from initial.time to time t, event by event."""
    _check_library_domain(lib, domain)
    for p in initial.particles:
        if not domain.contains(p.r):
            from .geometry import DomainError
            raise DomainError(f"initial particle at {p.r.tolist()} is outside the domain")
    pending = [(initial.time, p) for p in initial.particles]
    done = []
    vel = lib.vtable.velocities
    while pending:
        if len(pending) + len(done) > cap:
            raise PopulationCapError(cap)
        s, p = pending.pop()
        while True:
            dt, ev = sample_event(p, lib, domain, rng)
            if s + dt >= t:
                if not (ev == BOUNDARY_EXIT and s + dt == t):
                    if not p.delayed:
                        p = Particle(p.species, p.r + (t - s) * vel[p.k], p.k)
                    done.append(p)
                break
            if ev == BOUNDARY_EXIT:
                break
            s += dt
            if not p.delayed:
                p = Particle(p.species, p.r + dt * vel[p.k], p.k)
            if ev == SCATTER:
                p = scatter(p, lib, rng)
                continue
            pending.extend((s, q) for q in fission(p, lib, rng))
            break
    return Population(t, done)


# ---------------------------------------------------------------- bulk kernel

@njit(cache=True, nogil=True)
def _tally(out, p, t_grid, s, e, inclusive, pos, vel, i, k, gk, gcoef, gvals, glo, gh, gn, gbox):
    for j in range(t_grid.shape[0]):
        tj = t_grid[j]
        if tj < s:
            continue
        if tj > e or (tj == e and not inclusive):
            break
        dt = tj - s
        out[p, j] += tracking.g_eval(gk, gcoef, gvals, glo, gh, gn, gbox, i, k,
                                     pos[0] + vel[0] * dt, pos[1] + vel[1] * dt, pos[2] + vel[2] * dt)


@njit(cache=True, nogil=True)
def _push(stack, n, i, pos, k, cell, s):
    if n == stack.shape[0]:
        bigger = np.empty((2 * stack.shape[0], 9))
        bigger[:n] = stack[:n]
        stack = bigger
    stack[n, 0] = i
    stack[n, 1] = pos[0]
    stack[n, 2] = pos[1]
    stack[n, 3] = pos[2]
    stack[n, 4] = k
    stack[n, 5] = s
    stack[n, 6] = cell[0]
    stack[n, 7] = cell[1]
    stack[n, 8] = cell[2]
    return stack


@njit(cache=True, nogil=True)
def branch_kernel(start, stop, out, status, seed, src_i, src_pos, src_k, t_grid, cap,
                  kind, prm, mlo, mh, mn, vel, rate, sig_s, scdf, fmass, myield, ell,
                  gk, gcoef, gvals, glo, gh, gn, gbox):
    T = t_grid[t_grid.shape[0] - 1]
    m = rate.shape[0]
    K = vel.shape[0]
    zero_vel = np.zeros(3)
    ctr = np.zeros(1, dtype=np.uint64)
    pos = np.empty(3)
    cell = np.empty(3, dtype=np.int64)
    res = np.empty(4)
    stack = np.empty((64, 9))
    for p in range(start, stop):
        key = stream_key(seed, p)
        ctr[0] = 0
        v0 = vel[src_k]
        tracking.locate_nb(mlo, mh, mn, src_pos[0], src_pos[1], src_pos[2], v0[0], v0[1], v0[2], cell)
        stack = _push(stack, 0, src_i, src_pos, src_k, cell, 0.0)
        n = 1
        while n > 0:
            n -= 1
            i = int(stack[n, 0])
            pos[0] = stack[n, 1]
            pos[1] = stack[n, 2]
            pos[2] = stack[n, 3]
            k = int(stack[n, 4])
            s = stack[n, 5]
            cell[0] = int(stack[n, 6])
            cell[1] = int(stack[n, 7])
            cell[2] = int(stack[n, 8])
            while True:
                if i >= ell:
                    c = cell[0] + mn[0] * (cell[1] + mn[1] * cell[2])
                    e = s + draw_exp1(key, ctr) / rate[i, c, k]
                    if e > T:
                        _tally(out, p, t_grid, s, np.inf, True, pos, zero_vel, i, k,
                               gk, gcoef, gvals, glo, gh, gn, gbox)
                        break
                    _tally(out, p, t_grid, s, e, False, pos, zero_vel, i, k,
                           gk, gcoef, gvals, glo, gh, gn, gbox)
                    s = e
                else:
                    v = vel[k]
                    tracking.flight_nb(kind, prm, mlo, mh, mn, pos, v, cell, rate, rate, i, k,
                                       T - s, draw_exp1(key, ctr), res)
                    outcome = int(res[1])
                    # s + (T - s) can round below T and miss the last tally time
                    e = T if outcome == tracking.CENSUS else s + res[0]
                    _tally(out, p, t_grid, s, e, outcome == tracking.CENSUS, pos, v, i, k,
                           gk, gcoef, gvals, glo, gh, gn, gbox)
                    if outcome != tracking.EVENT:
                        break
                    pos[0] += v[0] * res[0]
                    pos[1] += v[1] * res[0]
                    pos[2] += v[2] * res[0]
                    s = e
                    c = int(res[2])
                    if draw_u01(key, ctr) * rate[i, c, k] < sig_s[i, c, k]:
                        k = draw_index(scdf[i, c, k], draw_u01(key, ctr))
                        continue
                c = cell[0] + mn[0] * (cell[1] + mn[1] * cell[2])
                for j in range(ell):
                    for k2 in range(K):
                        mu = fmass[i, j, c, k, k2]
                        if mu > 0.0:
                            nn = int(math.floor(mu))
                            frac = mu - nn
                            if frac > 0.0 and draw_u01(key, ctr) < frac:
                                nn += 1
                            for _ in range(nn):
                                stack = _push(stack, n, j, pos, k2, cell, s)
                                n += 1
                if i == 0:
                    for j in range(ell, m):
                        mu = myield[j, c, k]
                        if mu > 0.0:
                            nn = int(math.floor(mu))
                            frac = mu - nn
                            if frac > 0.0 and draw_u01(key, ctr) < frac:
                                nn += 1
                            for _ in range(nn):
                                stack = _push(stack, n, j, pos, k, cell, s)
                                n += 1
                break
            if n > cap:
                status[p] = 1
                break


def pack_library(lib, domain):
    """Arrays consumed by the compiled kernels."""
    _check_library_domain(lib, domain)
    mesh = lib.mesh
    w = lib.vtable.weights
    return dict(
        kind=domain.kind, prm=domain.param_array, mlo=mesh.lo, mh=mesh.h, mn=mesh.shape_array,
        vel=np.ascontiguousarray(lib.vtable.velocities),
        rate=np.ascontiguousarray(lib.event_rates()),
        sig_s=np.ascontiguousarray(lib.sigma_s),
        scdf=np.ascontiguousarray(np.cumsum(lib.pi_s * w, axis=-1)),
        fmass=np.ascontiguousarray(lib.fission_masses()),
        myield=np.ascontiguousarray(lib.m_yield),
        ell=lib.ell)


def growth_rate_bound(lib):
    """eta * (n_max * m - 1) with eta = sup sigma_f + max lambda."""
    eta = float(lib.sigma_f.max() + lib.lambda_delay.max())
    return eta * (lib.n_max * lib.m - 1)


def growth_bound(lib, g, t):
    """Upper bound on psi_t[g] from the dominating Galton-Watson process."""
    return g.sup_norm() * math.exp(growth_rate_bound(lib) * t)


def dominating_counts(lib, t_grid, rng, n0=1):
    """One path of the dominating Galton-Watson count Z_t on ``t_grid``.

    Every individual branches at rate eta into n_max * m copies, so Z_t is
    non-decreasing and dominates the particle count of the branching process.
    """
    t_grid = check_t_grid(t_grid)
    eta = float(lib.sigma_f.max() + lib.lambda_delay.max())
    b = lib.n_max * lib.m
    z, s = n0, 0.0
    out = np.empty(len(t_grid), dtype=np.int64)
    for j, tj in enumerate(t_grid):
        while eta > 0 and z > 0:
            dt = rng.exponential() / (eta * z)
            if s + dt > tj:
                # memoryless: restart the clock at tj
                s = tj
                break
            s += dt
            z += b - 1
        out[j] = z
    return out


def _check_source(lib, domain, source):
    if not 0 <= source.species < lib.m:
        raise IndexError(f"source species {source.species} out of range")
    if not 0 <= source.k < lib.K:
        raise IndexError(f"source velocity index {source.k} out of range")
    if not domain.contains(source.r):
        from .geometry import DomainError
        raise DomainError(f"source at {source.r.tolist()} is outside the domain")


def estimate_psi_series(lib, domain, g, source, t_grid, n_paths, seed, workers=1, cap=DEFAULT_CAP,
                        return_samples=False):
    """Estimates of psi_t[g](source) for every t in an increasing grid, from one set of paths."""
    t_grid = check_t_grid(t_grid)
    _check_source(lib, domain, source)
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    if math.exp(min(growth_rate_bound(lib) * t_grid[-1], 700.0)) > cap:
        warnings.warn("the dominating process bound exceeds the population cap; "
                      "a supercritical blow-up error is possible", RuntimeWarning, stacklevel=2)
    pk = pack_library(lib, domain)
    args = (np.uint64(seed), int(source.species), source.r, int(source.k), t_grid, int(cap),
            pk["kind"], pk["prm"], pk["mlo"], pk["mh"], pk["mn"], pk["vel"], pk["rate"], pk["sig_s"],
            pk["scdf"], pk["fmass"], pk["myield"], pk["ell"]) + g.packed()
    out, status = run_batches(branch_kernel, int(n_paths), len(t_grid), workers, args)
    if status.any():
        raise PopulationCapError(cap)
    est = summarize(out, t_grid)
    return (est, out) if return_samples else est


def estimate_psi(lib, domain, g, source, t, n_paths, seed, workers=1, cap=DEFAULT_CAP):
    """Monte Carlo estimate of psi_t[g] at the source state."""
    return estimate_psi_series(lib, domain, g, source, [t], n_paths, seed, workers, cap)[0]


def rng_for(seed, stream=0):
    return CounterRNG(seed, stream)
