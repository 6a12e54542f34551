"""Regenerate the shipped scenario and library files in src/mnte/data.

Kernels are written as per-channel masses (pi * w) so every scatter row sums
to one up to the last printed digit.  The fuel neutron multiplicity of each
slab library is tuned so the deterministic lambda_c at h = 1/64 hits a
target growth rate.
"""
import argparse
import math
from pathlib import Path

import numpy as np
import yaml

DATA = Path(__file__).resolve().parents[1] / "src" / "mnte" / "data"


def shell_weight(a, b, n):
    return 4.0 / 3.0 * math.pi * (b ** 3 - a ** 3) / n


def slab_velocities():
    """Two speeds times four direction cosines, weights from the speed shells."""
    rows = []
    for speed, (a, b) in ((1.0, (0.5, 1.5)), (2.0, (1.5, 2.5))):
        for mu in (-0.9, -0.4, 0.4, 0.9):
            rows.append([speed * mu, speed * math.sqrt(1 - mu * mu), 0.0, shell_weight(a, b, 4)])
    return rows, 0.5, 2.5


def axis_velocities():
    rows = []
    for d in range(3):
        for s in (1.0, -1.0):
            v = [0.0, 0.0, 0.0]
            v[d] = s
            rows.append(v + [shell_weight(0.5, 1.5, 6)])
    return rows, 0.5, 1.5


def line_velocities():
    rows = []
    for speed, (a, b) in ((1.0, (0.5, 1.5)), (2.0, (1.5, 2.5))):
        for s in (1.0, -1.0):
            rows.append([s * speed, 0.0, 0.0, shell_weight(a, b, 2)])
    return rows, 0.5, 2.5


def scatter_mass(vel, bias):
    """Row-stochastic scatter masses preferring forward and down-speed transfers."""
    v = np.array(vel)[:, :3]
    sp = np.linalg.norm(v, axis=1)
    u = v / sp[:, None]
    P = np.exp(bias * u @ u.T) * np.where(sp[None, :] <= sp[:, None], 1.5, 0.5)
    return (P / P.sum(axis=1, keepdims=True)).tolist()


def emission_mass(vel, nu, fast=0.7):
    """Isotropic emission with a fixed speed spectrum: nu * chi(k') for every k."""
    sp = np.linalg.norm(np.array(vel)[:, :3], axis=1)
    fastest = sp.max()
    chi = np.where(sp == fastest, fast, 1.0 - fast)
    groups = {s: np.sum(sp == s) for s in np.unique(sp)}
    if len(groups) == 1:
        chi = np.ones_like(sp)
    chi = chi / np.array([groups[s] for s in sp])
    row = nu * chi / chi.sum() if len(groups) == 1 else nu * chi
    return np.tile(row, (len(sp), 1)).tolist()


def by_speed(vel, slow, fast):
    sp = np.linalg.norm(np.array(vel)[:, :3], axis=1)
    return [fast if s == sp.max() and sp.max() != sp.min() else slow for s in sp]


def three_species_material(vel, *, ss1, sf1, nu11, nu12, myield, ss2, sf2, nu21, nu22, nu31, nu32, bias):
    return {
        "sigma_s": {1: by_speed(vel, ss1 * 1.2, ss1 * 0.8), 2: by_speed(vel, ss2, ss2)},
        "sigma_f": {1: by_speed(vel, sf1 * 1.2, sf1 * 0.8), 2: by_speed(vel, sf2, sf2)},
        "pi_s": {1: scatter_mass(vel, bias), 2: scatter_mass(vel, 0.2)},
        "pi_f": {"1>1": emission_mass(vel, nu11), "1>2": emission_mass(vel, nu12),
                 "2>1": emission_mass(vel, nu21), "2>2": emission_mass(vel, nu22),
                 "3>1": emission_mass(vel, nu31), "3>2": emission_mass(vel, nu32)},
        "m_yield": {3: [myield] * len(vel)},
    }


def slab_library(name, nu_fuel):
    vel, vmin, vmax = slab_velocities()
    fuel = three_species_material(vel, ss1=1.0, sf1=0.8, nu11=nu_fuel, nu12=0.4, myield=0.2,
                                  ss2=0.6, sf2=0.3, nu21=0.6, nu22=0.2, nu31=0.8, nu32=0.2, bias=0.5)
    moderator = three_species_material(vel, ss1=1.5, sf1=0.1, nu11=0.5, nu12=0.2, myield=0.05,
                                       ss2=0.8, sf2=0.1, nu21=0.3, nu22=0.05, nu31=0.8, nu32=0.2, bias=0.3)
    return {
        "name": name, "species": {"m": 3, "ell": 2}, "n_max": 6,
        "velocities": {"v_min": vmin, "v_max": vmax, "table": vel},
        "mesh": {"cells": [4, 1, 1]}, "kernel_form": "mass", "decay": [1.0],
        "materials": {"fuel": fuel, "moderator": moderator},
        "material_map": ["moderator", "fuel", "fuel", "moderator"],
    }


def homogeneous_library():
    vel, vmin, vmax = line_velocities()
    mat = three_species_material(vel, ss1=1.0, sf1=0.5, nu11=1.6, nu12=0.3, myield=0.25,
                                 ss2=0.7, sf2=0.4, nu21=0.8, nu22=0.1, nu31=0.7, nu32=0.3, bias=0.4)
    return {
        "name": "homogeneous", "species": {"m": 3, "ell": 2}, "n_max": 3,
        "velocities": {"v_min": vmin, "v_max": vmax, "table": vel},
        "mesh": {"cells": [1, 1, 1]}, "kernel_form": "mass", "decay": [0.8],
        "materials": {"medium": mat}, "material_map": "medium",
    }


def box_library():
    vel, vmin, vmax = axis_velocities()

    def mat(ss, sf, nu, my, bias):
        return {"sigma_s": {1: [ss] * 6}, "sigma_f": {1: [sf] * 6},
                "pi_s": {1: scatter_mass(vel, bias)},
                "pi_f": {"1>1": emission_mass(vel, nu), "2>1": emission_mass(vel, 1.0)},
                "m_yield": {2: [my] * 6}}

    cmap = []
    for iz in range(2):
        for iy in range(2):
            for ix in range(2):
                cmap.append("fuel" if (ix + iy + iz) % 2 == 0 else "moderator")
    return {
        "name": "box3d", "species": {"m": 2, "ell": 1}, "n_max": 4,
        "velocities": {"v_min": vmin, "v_max": vmax, "table": vel},
        "mesh": {"cells": [2, 2, 2]}, "kernel_form": "mass", "decay": [0.5],
        "materials": {"fuel": mat(1.0, 1.0, 2.4, 0.2, 0.5), "moderator": mat(2.0, 0.2, 0.8, 0.05, 0.2)},
        "material_map": cmap,
    }


def scenario(name, library, domain, source, g, t_grid, n_paths=100000, seed=1, solver=None, eigen=None):
    return {"name": name, "library": library, "domain": domain, "source": source, "g": g,
            "t_grid": t_grid, "n_paths": n_paths, "seed": seed, "workers": 1, "cap": 10_000_000,
            "solver": solver or {}, "eigen": eigen or {}}


SLAB_TARGETS = {"slab_sub": -0.4, "slab_near": 0.0, "slab_super": 0.5}


def tune_slab(name, target):
    from mnte.config import library_from_dict
    from mnte.eigen import lambda_c_by_root
    from mnte.geometry import Domain
    from mnte.semigroup import assemble

    dom = Domain.slab(0.0, 1.0)

    def lam(nu):
        lib = library_from_dict(slab_library(name, nu), dom)
        return lambda_c_by_root(assemble(lib, dom, h=1 / 64), tol=1e-12)

    lo, hi = 0.5, 8.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if lam(mid) < target:
            lo = mid
        else:
            hi = mid
    return round(0.5 * (lo + hi), 3)


def write(path, obj):
    with open(path, "w") as fh:
        yaml.safe_dump(obj, fh, sort_keys=False, default_flow_style=None, width=200)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--nu", nargs=3, type=float, help="fuel multiplicities for sub, near, super (skip tuning)")
    args = ap.parse_args()
    DATA.mkdir(parents=True, exist_ok=True)
    nus = dict(zip(SLAB_TARGETS, args.nu)) if args.nu else {n: tune_slab(n, t) for n, t in SLAB_TARGETS.items()}
    slab_dom = {"shape": "slab", "params": [0.0, 1.0]}
    sine = {"kind": "sine", "species": [1, 2], "value": 1.0}
    for name, nu in nus.items():
        print(name, "fuel multiplicity", nu)
        write(DATA / f"{name}.lib.yaml", slab_library(name, nu))
        write(DATA / f"{name}.yaml", scenario(
            name, f"{name}.lib.yaml", slab_dom, {"species": 1, "position": [0.4, 0.0, 0.0], "velocity": 7},
            sine, [0.5, 1.0, 2.0], seed=1000 + list(nus).index(name),
            solver={"h": 1 / 64, "n_quad": 64, "n_picard": 50, "tol": 1e-10, "route": "acp"},
            eigen={"route": "both", "delta": 1.0, "tol": 1e-12}))
    write(DATA / "homogeneous.lib.yaml", homogeneous_library())
    big = 1.0e6
    write(DATA / "homogeneous.yaml", scenario(
        "homogeneous", "homogeneous.lib.yaml", {"shape": "box", "params": [-big] * 3 + [big] * 3},
        {"species": 1, "position": [0.0, 0.0, 0.0], "velocity": 1},
        {"kind": "table", "coef": [[1.0, 0.5, 2.0, 1.5], [0.5, 1.0, 0.25, 0.75], [1.0, 1.0, 1.0, 1.0]]},
        [0.5, 1.0, 2.0], seed=2000, solver={"route": "acp"}, eigen={"route": "both", "delta": 1.0, "tol": 1e-12}))
    write(DATA / "box3d.lib.yaml", box_library())
    write(DATA / "box3d.yaml", scenario(
        "box3d", "box3d.lib.yaml", {"shape": "box", "params": [0.0, 0.0, 0.0, 2.0, 2.0, 2.0]},
        {"species": 1, "position": [0.7, 0.9, 1.1], "velocity": 1},
        {"kind": "indicator", "species": [1, 2], "value": 1.0, "lo": [0.0, 0.0, 0.0], "hi": [1.0, 2.0, 2.0]},
        [0.5, 1.0, 2.0], seed=3000, solver={"h": 0.25, "route": "acp"}, eigen={"route": "both", "delta": 1.0}))


if __name__ == "__main__":
    main()
