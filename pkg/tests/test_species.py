import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mnte.geometry import Domain
from mnte.species import (CollapseError, SpatialMesh, SpeciesLayout, StructuralError, collapse, kernel_k,
                          total_rate, validate_library)

from helpers import annulus_table, axis_velocities, homogeneous_oracle_library, huge_box, make_library


def single_prompt(sigma_s=1.0, sigma_f=0.5, total_yield=2.0, K=2):
    vt = annulus_table([[1, 0, 0], [-1, 0, 0]][:K])
    fm = np.full((1, 1, K, K), total_yield / K)
    return make_library(huge_box(), vt, sigma_s=sigma_s, sigma_f=sigma_f, fission_mass=fm)


def three_species(decay=(0.5,), m_yield=0.3):
    vt = annulus_table(axis_velocities())
    K = vt.K
    fm = np.zeros((3, 2, K, K))
    fm[:2] = 0.2 / K
    fm[2] = 0.5 / K
    return make_library(huge_box(), vt, m=3, ell=2, sigma_s=1.0, sigma_f=0.4, fission_mass=fm,
                        m_yield=m_yield, decay=decay)


# ---------------------------------------------------------------- layout and structure

def test_layout_bounds():
    SpeciesLayout(3, 3)
    with pytest.raises(StructuralError):
        SpeciesLayout(2, 3)
    with pytest.raises(StructuralError):
        SpeciesLayout(2, 0)


def test_wrong_array_shape_is_structural_error():
    lib = single_prompt()
    with pytest.raises(StructuralError, match="sigma_s"):
        lib.replace(sigma_s=np.zeros((2, 1, 2)))


def test_slab_mesh_is_one_cell_across():
    with pytest.raises(StructuralError):
        SpatialMesh(Domain.slab(0, 1), (4, 2, 1))


# ---------------------------------------------------------------- validation examples

def test_valid_library_has_empty_report():
    assert validate_library(three_species()).ok


def test_unnormalized_scatter_row_flagged_at_its_coordinates():
    lib = single_prompt()
    ps = np.array(lib.pi_s)
    ps[0, 0, 1] *= 0.97
    rep = validate_library(lib.replace(pi_s=ps))
    bad = [v for v in rep.violations if v.rule == "scatter_normalization"]
    assert [v.where for v in bad] == [(0, 0, 1)]


def test_no_fission_library_only_flags_isotope_production():
    lib = three_species()
    lib = lib.replace(sigma_f=np.zeros_like(lib.sigma_f))
    assert validate_library(lib).rules() == {"isotope_production"}


def test_decay_ordering_flagged():
    vt = annulus_table(axis_velocities())
    K = vt.K
    fm = np.zeros((4, 2, K, K))
    fm[2:] = 1.0 / K
    lib = make_library(huge_box(), vt, m=4, ell=2, sigma_s=1.0, sigma_f=0.4, fission_mass=fm,
                       m_yield=0.2, decay=(3.0, 2.0))
    assert validate_library(lib).rules() == {"decay_ordering"}


def test_yield_cap_and_weight_volume():
    lib = single_prompt(total_yield=5.0)
    assert "yield_cap" in validate_library(lib).rules()
    vt = lib.vtable
    bad = type(vt)(vt.velocities, vt.weights * 1.01, vt.v_min, vt.v_max)
    assert "weight_volume" in validate_library(lib.replace(vtable=bad)).rules()


def test_negative_entry_flagged():
    lib = single_prompt()
    sf = np.array(lib.sigma_f)
    sf[0, 0, 0] = -0.1
    assert "finite_nonnegative" in validate_library(lib.replace(sigma_f=sf)).rules()


# ---------------------------------------------------------------- total_rate and kernel_k

def test_total_rate_examples():
    lib = single_prompt(sigma_s=1.0, sigma_f=0.5)
    assert total_rate(lib, 0, 0, 0) == 1.5
    lib3 = three_species(decay=(0.1,))
    assert total_rate(lib3, 2, 0, 3) == 0.1
    zero = single_prompt(sigma_s=0.0, sigma_f=0.0)
    assert total_rate(zero, 0, 0, 1) == 0.0
    with pytest.raises(IndexError):
        total_rate(lib, 1, 0, 0)


def test_kernel_k_examples():
    lib = three_species()
    c, k, k2 = 0, 1, 4
    same = lib.sigma_s[0, c, k] * lib.pi_s[0, c, k, k2] + lib.sigma_f[0, c, k] * lib.pi_f[0, 0, c, k, k2]
    assert kernel_k(lib, 0, 0, c, k, k2) == pytest.approx(same, rel=1e-15)
    assert kernel_k(lib, 0, 1, c, k, k2) == pytest.approx(lib.sigma_f[0, c, k] * lib.pi_f[0, 1, c, k, k2])
    assert kernel_k(lib, 2, 0, c, k, k2) == pytest.approx(lib.lambda_delay[2] * lib.pi_f[2, 0, c, k, k2])
    zero = single_prompt(sigma_s=0.0, sigma_f=0.0)
    assert kernel_k(zero, 0, 0, 0, 0, 1) == 0.0


# ---------------------------------------------------------------- collapse

def test_collapse_hand_example():
    col = collapse(single_prompt(sigma_s=1.0, sigma_f=0.5, total_yield=2.0))
    assert np.allclose(col.alpha, 2.0, rtol=0, atol=1e-15)
    assert np.allclose(col.beta, 0.5, rtol=0, atol=1e-15)


def test_collapse_without_fission_is_scatter():
    lib = single_prompt(sigma_s=1.3, sigma_f=0.0, total_yield=0.0)
    col = collapse(lib)
    assert np.array_equal(col.alpha, lib.sigma_s)
    assert np.allclose(col.pi[0, 0], lib.pi_s[0], rtol=1e-15)
    assert np.all(col.beta == 0.0)


def test_collapse_delayed_alpha_is_decay_rate_when_yield_mass_is_one():
    lib = three_species(decay=(0.7,))
    col = collapse(lib)
    assert np.allclose(col.alpha[2], 0.7 * 1.0, rtol=1e-14)
    assert np.allclose(col.beta[2], 0.0, atol=1e-14)


def test_zero_rate_state_gets_self_loop():
    lib = single_prompt(sigma_s=0.0, sigma_f=0.0)
    col = collapse(lib)
    mass = col.jump_masses()
    assert np.all(col.alpha == 0)
    assert np.allclose(mass.sum(axis=-1), 1.0)
    assert mass[0, 0, 1, 1] == pytest.approx(1.0)


def test_collapse_error_when_rate_zero_but_kernel_nonzero():
    lib = single_prompt(sigma_s=0.0, sigma_f=0.0)
    # nonzero scatter kernel with zero rate gives a zero numerator: still fine
    collapse(lib)
    # a negative kernel mass that cancels the rate exactly leaves a nonzero numerator
    pf = np.array(lib.pi_f)
    pf[0, 0, 0, 0, 0] = 1.0
    pf[0, 0, 0, 0, 1] = -1.0
    bad = lib.replace(sigma_f=np.full_like(lib.sigma_f, 1.0), pi_f=pf)
    with pytest.raises(CollapseError, match="i=0, c=0, k=0"):
        collapse(bad)


def _independent_beta(lib):
    """beta from its defining formula, loop by loop."""
    m, ell, nc, K = lib.m, lib.ell, lib.n_cells, lib.K
    w = lib.vtable.weights
    out = np.zeros((m, nc, K))
    for i in range(m):
        for c in range(nc):
            for k in range(K):
                if i < ell:
                    yld = sum(lib.pi_f[i, j, c, k, k2] * w[k2] for j in range(ell) for k2 in range(K))
                    if i == 0:
                        yld += sum(lib.m_yield[j, c, k] for j in range(ell, m))
                    out[i, c, k] = lib.sigma_f[i, c, k] * (yld - 1.0)
                else:
                    yld = sum(lib.pi_f[i, j, c, k, k2] * w[k2] for j in range(ell) for k2 in range(K))
                    out[i, c, k] = lib.lambda_delay[i] * (yld - 1.0)
    return out


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(2, 5))
def test_collapse_invariants_on_random_libraries(seed, m_delayed, K):
    m = 2 + m_delayed
    lib = homogeneous_oracle_library(seed, m=m, ell=2, K=K)
    assert validate_library(lib).ok
    col = collapse(lib)
    mass = col.jump_masses().sum(axis=-1)
    assert np.max(np.abs(mass - 1.0)) <= 1e-12
    assert np.allclose(col.beta, _independent_beta(lib), rtol=0, atol=1e-13)
    rates = np.array([[[total_rate(lib, i, c, k) for k in range(K)] for c in range(lib.n_cells)]
                      for i in range(m)])
    assert np.allclose(col.alpha - col.beta, rates, rtol=0, atol=1e-13)
    assert np.all(col.pi >= 0)
