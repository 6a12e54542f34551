import math
import warnings

import numpy as np
import pytest

from mnte.branching import (BOUNDARY_EXIT, DECAY, FISSION, SCATTER, Particle, Population, PopulationCapError,
                            dominating_counts, estimate_psi, estimate_psi_series, fission, growth_bound,
                            make_particle, sample_event, scatter, simulate_population)
from mnte.geometry import Domain
from mnte.rng import CounterRNG
from mnte.semigroup import assemble, mild_solve, point_value
from mnte.tally import TallyFunction

from helpers import (annulus_table, axis_velocities, homogeneous_oracle_library, huge_box, make_library,
                     oracle_value)

pytestmark = pytest.mark.filterwarnings("ignore:the dominating process bound")


def one_velocity(rate_s=0.0, rate_f=0.0, fission_mass=None, domain=None, cells=(1, 1, 1), K=1, **kw):
    domain = huge_box() if domain is None else domain
    vel = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]][:K]
    vt = annulus_table(vel)
    fm = None if fission_mass is None else np.asarray(fission_mass, dtype=float)
    return make_library(domain, vt, sigma_s=rate_s, sigma_f=rate_f, fission_mass=fm, cells=cells, **kw)


# ---------------------------------------------------------------- sample_event

def test_event_time_is_exponential():
    lib = one_velocity(rate_s=1.2, rate_f=0.8, fission_mass=np.zeros((1, 1, 1, 1)))
    rng = CounterRNG(3)
    p = make_particle(lib, 0, (0, 0, 0), 0)
    draws = [sample_event(p, lib, huge_box(), rng) for _ in range(100_000)]
    dt = np.array([d for d, _ in draws])
    assert abs(dt.mean() - 0.5) <= 3 * dt.std(ddof=1) / math.sqrt(len(dt))
    frac_s = np.mean([e == SCATTER for _, e in draws])
    assert abs(frac_s - 0.6) <= 3 * math.sqrt(0.24 / len(dt))
    assert {e for _, e in draws} == {SCATTER, FISSION}


def test_no_rate_means_boundary_exit():
    slab = Domain.slab(0.0, 1.0)
    lib = one_velocity(domain=slab)
    ev = sample_event(make_particle(lib, 0, (0.3, 0, 0), 0), lib, slab, CounterRNG(1))
    assert ev == (pytest.approx(0.7), BOUNDARY_EXIT)


def test_piecewise_survival_across_interface():
    slab = Domain.slab(0.0, 2.0)
    rates = np.array([1.0, 3.0]).reshape(1, 2, 1)
    lib = one_velocity(rate_s=rates, domain=slab, cells=(2, 1, 1))
    rng = CounterRNG(11)
    p = make_particle(lib, 0, (0.5, 0, 0), 0)
    dt = np.array([sample_event(p, lib, slab, rng)[0] for _ in range(100_000)])
    for t, integral in ((0.3, 0.3), (0.8, 0.5 + 3 * 0.3), (1.2, 0.5 + 3 * 0.7)):
        want = math.exp(-integral)
        got = np.mean(dt > t)
        assert abs(got - want) <= 3 * math.sqrt(want * (1 - want) / len(dt))


def test_delayed_holder_decays_in_place():
    vt = annulus_table(axis_velocities())
    fm = np.zeros((2, 1, 6, 6))
    fm[1] = 1.0 / 6
    lib = make_library(huge_box(), vt, m=2, ell=1, sigma_s=1.0, sigma_f=0.5, fission_mass=fm,
                       m_yield=0.5, decay=(2.0,))
    p = make_particle(lib, 1, (0.1, 0.2, 0.3), 4)
    assert p.kind == "delayed-holder"
    rng = CounterRNG(2)
    draws = [sample_event(p, lib, huge_box(), rng) for _ in range(20_000)]
    assert all(e == DECAY for _, e in draws)
    assert abs(np.mean([d for d, _ in draws]) - 0.5) < 0.02


# ---------------------------------------------------------------- scatter

def _scatter_freq(mass, n=100_000, seed=4):
    K = mass.shape[0]
    lib = one_velocity(rate_s=1.0, K=K, scatter_mass=mass)
    rng = CounterRNG(seed)
    p = make_particle(lib, 0, (0, 0, 0), 0)
    return np.bincount([scatter(p, lib, rng).k for _ in range(n)], minlength=K) / n


def test_identity_scatter_keeps_velocity():
    freq = _scatter_freq(np.eye(4), n=1000)
    assert freq[0] == 1.0


@pytest.mark.parametrize("row", [[0.25] * 4, [0.3, 0.7]])
def test_scatter_frequencies(row):
    row = np.array(row)
    freq = _scatter_freq(np.tile(row, (len(row), 1)))
    assert np.all(np.abs(freq - row) <= 3 * np.sqrt(row * (1 - row) / 100_000))


def test_unnormalized_scatter_row_raises():
    lib = one_velocity(rate_s=1.0, K=2, scatter_mass=np.full((2, 2), 0.45))
    with pytest.raises(ValueError, match="mass"):
        scatter(make_particle(lib, 0, (0, 0, 0), 0), lib, CounterRNG(0))


# ---------------------------------------------------------------- fission

def test_fission_examples():
    rng = CounterRNG(5)
    cap = one_velocity(rate_f=1.0, fission_mass=np.zeros((1, 1, 1, 1)))
    assert fission(make_particle(cap, 0, (0, 0, 0), 0), cap, rng) == []
    two = one_velocity(rate_f=1.0, fission_mass=np.full((1, 1, 1, 1), 2.0))
    assert all(len(fission(make_particle(two, 0, (0, 0, 0), 0), two, rng)) == 2 for _ in range(500))
    half = one_velocity(rate_f=1.0, fission_mass=np.full((1, 1, 1, 1), 1.5))
    counts = np.array([len(fission(make_particle(half, 0, (0, 0, 0), 0), half, rng)) for _ in range(100_000)])
    assert set(np.unique(counts)) == {1, 2}
    assert abs(counts.mean() - 1.5) <= 3 * 0.5 / math.sqrt(len(counts))


def test_fission_isotopes_inherit_mark():
    vt = annulus_table(axis_velocities())
    fm = np.zeros((2, 1, 6, 6))
    fm[1] = 1.0 / 6
    lib = make_library(huge_box(), vt, m=2, ell=1, sigma_s=1.0, sigma_f=0.5, fission_mass=fm,
                       m_yield=1.0, decay=(2.0,))
    kids = fission(make_particle(lib, 0, (1, 2, 3), 3), lib, CounterRNG(0))
    assert len(kids) == 1 and kids[0].species == 1 and kids[0].k == 3 and kids[0].delayed
    assert np.array_equal(kids[0].r, [1, 2, 3])
    # holder decay emits prompt particles from the decay rows
    out = fission(kids[0], lib, CounterRNG(1))
    assert len(out) == 1 and out[0].species == 0 and not out[0].delayed


# ---------------------------------------------------------------- simulate_population

def test_pure_transport():
    lib = one_velocity(K=2)
    pop = Population(0.0, [make_particle(lib, 0, (0, 0, 0), 0), make_particle(lib, 0, (1, 1, 1), 1)])
    out = simulate_population(pop, lib, huge_box(), 2.5, CounterRNG(0))
    pos = sorted(tuple(p.r) for p in out.particles)
    assert pos == sorted([(2.5, 0, 0), (-1.5, 1, 1)])


def test_pure_capture_population_never_grows():
    lib = one_velocity(rate_s=0.5, rate_f=1.0, fission_mass=np.zeros((1, 1, 1, 1)))
    rng = CounterRNG(8)
    pop = Population(0.0, [make_particle(lib, 0, (0, 0, 0), 0) for _ in range(20)])
    sizes = [len(pop)]
    for t in (0.2, 0.5, 1.0, 2.0):
        pop = simulate_population(pop, lib, huge_box(), t, rng)
        sizes.append(len(pop))
    assert all(b <= a for a, b in zip(sizes, sizes[1:]))


def test_binary_fission_mean_growth():
    b = 1.0
    lib = one_velocity(rate_f=b, fission_mass=np.full((1, 1, 1, 1), 2.0))
    rng = CounterRNG(21)
    sizes = np.array([len(simulate_population(Population(0.0, [make_particle(lib, 0, (0, 0, 0), 0)]),
                                              lib, huge_box(), 1.0 / b, rng)) for _ in range(10_000)])
    se = sizes.std(ddof=1) / math.sqrt(len(sizes))
    assert abs(sizes.mean() - math.e) <= 3 * se


def test_population_cap():
    lib = one_velocity(rate_f=5.0, fission_mass=np.full((1, 1, 1, 1), 3.0))
    pop = Population(0.0, [make_particle(lib, 0, (0, 0, 0), 0)])
    with pytest.raises(PopulationCapError, match="cap of 50"):
        simulate_population(pop, lib, huge_box(), 10.0, CounterRNG(0), cap=50)
    g = TallyFunction.constant(1, 1)
    with pytest.raises(PopulationCapError):
        estimate_psi(lib, huge_box(), g, pop.particles[0], 10.0, 10, seed=1, cap=50)


# ---------------------------------------------------------------- estimate_psi

def test_conservation_gives_one_exactly():
    lib = one_velocity(rate_s=2.0, K=4)
    g = TallyFunction.constant(1, 4)
    est = estimate_psi(lib, huge_box(), g, Particle(0, (0, 0, 0), 1), 1.5, 1000, seed=3)
    assert est.mean == 1.0 and est.stderr == 0.0


def test_pure_capture_decay():
    lib = one_velocity(rate_f=1.0, fission_mass=np.zeros((1, 1, 1, 1)))
    g = TallyFunction.constant(1, 1)
    est = estimate_psi(lib, huge_box(), g, Particle(0, (0, 0, 0), 0), 1.0, 100_000, seed=17)
    assert abs(est.mean - math.exp(-1)) <= 3 * est.stderr


def test_matches_matrix_exponential_oracle():
    lib = homogeneous_oracle_library(seed=5)
    coef = np.random.default_rng(1).uniform(0.2, 2.0, size=(lib.m, lib.K))
    g = TallyFunction.table(coef)
    src = make_particle(lib, 0, (0, 0, 0), 2)
    ests = estimate_psi_series(lib, huge_box(), g, src, [0.5, 1.0, 2.0], 100_000, seed=99)
    for e in ests:
        assert abs(e.mean - oracle_value(lib, coef, 0, 2, e.t)) <= 3 * e.stderr


def test_series_matches_single_time_runs():
    lib = homogeneous_oracle_library(seed=2)
    g = TallyFunction.constant(lib.m, lib.K)
    src = make_particle(lib, 1, (0, 0, 0), 0)
    series = estimate_psi_series(lib, huge_box(), g, src, [0.3, 0.9], 2000, seed=4)
    single = estimate_psi(lib, huge_box(), g, src, 0.9, 2000, seed=4)
    assert series[1].mean == single.mean


def test_worker_count_does_not_change_result():
    lib = homogeneous_oracle_library(seed=3)
    g = TallyFunction.constant(lib.m, lib.K)
    src = make_particle(lib, 0, (0, 0, 0), 0)
    runs = [estimate_psi_series(lib, huge_box(), g, src, [0.5, 1.0], 3001, seed=8, workers=w) for w in (1, 2, 8)]
    for r in runs[1:]:
        assert [e.mean for e in r] == [e.mean for e in runs[0]]
        assert [e.stderr for e in r] == [e.stderr for e in runs[0]]


def test_growth_bound_holds():
    lib = homogeneous_oracle_library(seed=6)
    g = TallyFunction.constant(lib.m, lib.K, 2.0)
    src = make_particle(lib, 0, (0, 0, 0), 0)
    for e in estimate_psi_series(lib, huge_box(), g, src, [0.5, 1.0, 2.0], 20_000, seed=1):
        assert e.mean - 3 * e.stderr <= growth_bound(lib, g, e.t)


def test_dominating_counts_monotone():
    lib = homogeneous_oracle_library(seed=1)
    t = np.linspace(0.01, 0.4, 15)
    for s in range(50):
        z = dominating_counts(lib, t, CounterRNG(s))
        assert np.all(np.diff(z) >= 0) and z[0] >= 1


def test_chapman_kolmogorov_on_homogeneous_library():
    lib = homogeneous_oracle_library(seed=7)
    coef = np.random.default_rng(3).uniform(0.5, 1.5, size=(lib.m, lib.K))
    g = TallyFunction.table(coef)
    src = make_particle(lib, 0, (0, 0, 0), 1)
    s, t, n = 0.4, 0.6, 40_000
    direct = estimate_psi(lib, huge_box(), g, src, s + t, n, seed=50)
    inner = np.zeros((lib.m, lib.K))
    inner_se = np.zeros((lib.m, lib.K))
    for j in range(lib.m):
        for k in range(lib.K):
            e = estimate_psi(lib, huge_box(), g, make_particle(lib, j, (0, 0, 0), k), t, n, seed=100 + j * lib.K + k)
            inner[j, k], inner_se[j, k] = e.mean, e.stderr
    outer = estimate_psi(lib, huge_box(), TallyFunction.table(inner), src, s, n, seed=51)
    # expected number of particles at each state after s, for the inner-table error
    weights = np.zeros((lib.m, lib.K))
    for j in range(lib.m):
        for k in range(lib.K):
            unit = np.zeros((lib.m, lib.K))
            unit[j, k] = 1.0
            weights[j, k] = oracle_value(lib, unit, 0, 1, s)
    se = math.sqrt(direct.stderr ** 2 + outer.stderr ** 2 + np.sum(weights ** 2 * inner_se ** 2))
    assert abs(direct.mean - outer.mean) <= 3 * se


def test_mild_identity_between_times():
    """The Duhamel solution restarted at t/2 reproduces the one-shot solution, and MC psi_t matches it."""
    slab = Domain.slab(0.0, 1.0)
    vt = annulus_table([[1, 0, 0], [-1, 0, 0]])
    sm = np.array([[0.6, 0.4], [0.4, 0.6]])
    fm = np.full((1, 1, 2, 2), 0.6)
    lib = make_library(slab, vt, sigma_s=1.0, sigma_f=0.8, scatter_mass=sm, fission_mass=fm, cells=(16, 1, 1))
    coef = np.ones((1, 2))
    g = TallyFunction.sine(coef, slab)
    t = 0.6
    mats = assemble(lib, slab, h=1 / 64)
    ss = mats.ss
    full = mild_solve(lib, slab, g, t, mats=mats, n_quad=48)
    half = mild_solve(lib, slab, g, t / 2, mats=mats, n_quad=24)
    restart = mild_solve(lib, slab, half, t / 2, mats=mats, n_quad=24)
    # x + t stays clear of the boundary, where the killed solution has a kink
    src = make_particle(lib, 0, (0.3, 0, 0), 0)
    mc = estimate_psi(lib, slab, g, src, t, 100_000, seed=12)
    a = point_value(ss, full, src.r, 0, 0)
    b = point_value(ss, restart, src.r, 0, 0)
    assert abs(a - b) < 5e-3 * abs(a)
    assert abs(mc.mean - a) <= 3 * mc.stderr + 0.005 * abs(a)
