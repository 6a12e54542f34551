"""Command line front end: one scenario file drives every route.

    mnte validate --scenario S
    mnte branch   --scenario S --out DIR [--seed N] [--paths N] [--workers W]
    mnte walk     --scenario S --out DIR ...
    mnte solve    --scenario S --out DIR [--route acp|mild|expm] [--grid]
    mnte eigen    --scenario S --out DIR [--route power|root|both|mc]
    mnte compare  --scenario S --out DIR [--check]

``--scenario`` also accepts the name of a shipped scenario (see ``mnte list``).
"""
import argparse
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .branching import estimate_psi_series, growth_bound
from .config import (BUILTIN, DATA_DIR, ScenarioError, builtin_scenario, grid_rows, parse_scenario,
                     write_csv)
from .eigen import (asymptotic_decay_check, eigen_by_root, leading_eigenpair, lambda_c_by_root,
                    mc_growth_rate, spectral_gap)
from .semigroup import DENSE_LIMIT, assemble, evolve_acp, mild_solve, point_value
from .species import collapse, validate_library
from .walk import estimate_phi_series

Z_LIMIT = 3.0


def load_scenario(spec):
    if spec in BUILTIN and not Path(spec).exists():
        return builtin_scenario(spec)
    return parse_scenario(spec)


def provenance(sc, route, seed=None, n_paths=None):
    parts = [f"mnte {__version__}", f"scenario={sc.name}", f"hash={sc.digest()}", f"route={route}"]
    if seed is not None:
        parts += [f"seed={seed}", f"n_paths={n_paths}"]
    return " ".join(parts)


class Run:
    """Resolved scenario plus command-line overrides."""

    def __init__(self, args):
        self.args = args
        self.sc = load_scenario(args.scenario)
        self.domain, self.lib, self.g, self.source = self.sc.load()
        self.seed = self.sc.seed if args.seed is None else args.seed
        self.n_paths = self.sc.n_paths if args.paths is None else args.paths
        self.workers = self.sc.workers if args.workers is None else args.workers
        self.t_grid = np.asarray(self.sc.t_grid, dtype=float)
        self.out = Path(args.out) if getattr(args, "out", None) else None
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
        self._mats = None

    @property
    def mats(self):
        if self._mats is None:
            self._mats = assemble(self.lib, self.domain, self.sc.solver.get("h"))
        return self._mats

    def write(self, name, header, rows, route, mc=False):
        prov = provenance(self.sc, route, self.seed if mc else None, self.n_paths if mc else None)
        text = write_csv(self.out / name, header, rows, prov) if self.out else None
        return text

    # routes --------------------------------------------------------------
    def psi(self, seed=None):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return estimate_psi_series(self.lib, self.domain, self.g, self.source, self.t_grid, self.n_paths,
                                       self.seed if seed is None else seed, self.workers, self.sc.cap)

    def phi(self, seed=None):
        # a distinct stream from the branching run so the two estimates are independent
        s = (self.seed if seed is None else seed) + 1
        return estimate_phi_series(collapse(self.lib), self.domain, self.g, self.source, self.t_grid,
                                   self.n_paths, s, self.workers)

    def deterministic(self, route=None):
        route = route or self.sc.solver.get("route", "acp")
        src = self.source
        vals = []
        if route == "mild":
            n_quad = int(self.sc.solver.get("n_quad", 64))
            for t in self.t_grid:
                u = mild_solve(self.lib, self.domain, self.g, float(t), int(self.sc.solver.get("n_picard", 50)),
                               n_quad, mats=self.mats, tol=float(self.sc.solver.get("tol", 1e-10)))
                vals.append(point_value(self.mats.ss, u, src.r, src.species, src.k))
            return vals, None
        method = "expm" if route == "expm" else "rk4"
        dt = self.sc.solver.get("dt")
        u = None
        prev = 0.0
        grids = []
        for t in self.t_grid:
            u = evolve_acp(self.mats, self.g if u is None else u, float(t) - prev, dt, method)
            prev = float(t)
            grids.append(u)
            vals.append(point_value(self.mats.ss, u, src.r, src.species, src.k))
        return vals, grids


def _mc_rows(est):
    return [(e.t, e.mean, e.stderr, e.n_paths) for e in est]


MC_HEADER = ["t", "mean", "stderr", "n_paths"]


def cmd_validate(run):
    rep = validate_library(run.lib)
    if rep.ok:
        print(f"{run.sc.name}: library {run.lib.name} passes all {len(VALIDATION_RULES)} structural rules")
        return 0
    for v in rep.violations:
        print(str(v), file=sys.stderr)
    print(f"{len(rep.violations)} violation(s) in rules {sorted(rep.rules())}", file=sys.stderr)
    return 1


VALIDATION_RULES = ("velocity_bounds", "speed_range", "weight_positive", "weight_volume", "finite_nonnegative",
                    "delayed_inactive", "prompt_isotope_yield", "prompt_decay", "scatter_normalization",
                    "scatter_positive", "yield_cap", "isotope_production", "decay_positive", "decay_ordering")


def _check_bound(run, est):
    bad = [e.t for e in est if e.mean - 3 * e.stderr > growth_bound(run.lib, run.g, e.t)]
    if bad:
        print(f"growth bound exceeded at t = {bad}", file=sys.stderr)
    return 1 if bad else 0


def cmd_branch(run):
    est = run.psi()
    run.write("branch.csv", MC_HEADER, _mc_rows(est), "branch", mc=True)
    for e in est:
        print(f"t = {e.t:g}: psi = {e.mean:.6g} +- {e.stderr:.2g}")
    return _check_bound(run, est) if run.args.check else 0


def cmd_walk(run):
    est = run.phi()
    run.write("walk.csv", MC_HEADER, _mc_rows(est), "walk", mc=True)
    for e in est:
        print(f"t = {e.t:g}: phi = {e.mean:.6g} +- {e.stderr:.2g}")
    return _check_bound(run, est) if run.args.check else 0


def cmd_solve(run):
    route = run.args.route or run.sc.solver.get("route", "acp")
    if route not in ("acp", "mild", "expm"):
        raise ScenarioError(f"solve: unknown route {route!r}")
    vals, grids = run.deterministic(route)
    run.write("solve.csv", ["t", "value"], list(zip(run.t_grid, vals)), f"solve:{route}")
    if run.args.grid and grids is not None and run.out is not None:
        for t, u in zip(run.t_grid, grids):
            run.write(f"grid_t{t:g}.csv", ["species", "cell", "velocity", "value"],
                      list(grid_rows(run.mats.ss, u)), f"solve:{route}")
    for t, v in zip(run.t_grid, vals):
        print(f"t = {t:g}: V_t g = {v:.10g}")
    if run.args.check and any(not (np.isfinite(v) and v >= -1e-12) for v in vals):
        return 1
    return 0


EIGEN_HEADERS = {
    "power": ["lambda_c", "residual", "residual_adjoint", "pairing", "iterations", "epsilon"],
    "root": ["lambda_c", "residual", "r_at_root"],
    "both": ["lambda_power", "lambda_root", "delta", "residual", "pairing", "epsilon"],
    "mc": ["lambda_mc", "ci95", "lambda_det", "n_points"],
}


def cmd_eigen(run):
    route = run.args.route or run.sc.eigen.get("route", "both")
    if route not in EIGEN_HEADERS:
        raise ScenarioError(f"eigen: unknown route {route!r}")
    mats = run.mats
    delta = float(run.sc.eigen.get("delta", 1.0))
    tol = float(run.sc.eigen.get("tol", 1e-12))
    W = mats.weights
    lines = [f"scenario {run.sc.name}, N = {mats.N}"]
    ok = True
    if route in ("power", "both"):
        eig = leading_eigenpair(mats, delta=delta, tol=tol)
        pairing = float(np.sum(W * eig.phi * eig.phi_tilde))
        eps = spectral_gap(mats, eig.lambda_c)[2] if mats.N <= DENSE_LIMIT else float("nan")
        lines += [f"lambda_c (power)  = {eig.lambda_c:.12g}",
                  f"residual |A phi - lambda phi| = {eig.residual:.3e}, adjoint {eig.residual_adjoint:.3e}",
                  f"<phi, phi~> = {pairing:.12g}",
                  f"gap epsilon = {eps:.6g}" if np.isfinite(eps) else "gap epsilon: fit-only (N too large)"]
        ok &= eig.residual < 1e-8 and abs(pairing - 1) < 1e-10
    if route in ("root", "both"):
        root = eigen_by_root(mats)
        lines.append(f"lambda_c (root)   = {root.lambda_c:.12g}, residual {root.residual:.3e}")
    if route == "power":
        rows = [(eig.lambda_c, eig.residual, eig.residual_adjoint, pairing, eig.iterations, eps)]
    elif route == "root":
        lam, rr = lambda_c_by_root(mats, full=True)
        rows = [(root.lambda_c, root.residual, rr.r)]
    elif route == "both":
        d = abs(eig.lambda_c - root.lambda_c)
        lines.append(f"agreement delta    = {d:.3e}")
        ok &= d < 1e-8 or mats.N > DENSE_LIMIT
        rows = [(eig.lambda_c, root.lambda_c, d, eig.residual, pairing, eps)]
    else:
        lam = lambda_c_by_root(mats)
        t_mc = np.asarray(run.sc.eigen.get("t_grid", np.linspace(0.5, 6.0, 12)), dtype=float)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            est = estimate_psi_series(run.lib, run.domain, run.g, run.source, t_mc, run.n_paths, run.seed,
                                      run.workers, run.sc.cap)
        fit = mc_growth_rate(t_mc, [e.mean for e in est], [e.stderr for e in est],
                             float(run.sc.eigen.get("burn_in", 0.3)))
        lines += [f"lambda_c (MC)     = {fit.rate:.6g} +- {fit.ci95:.2g}", f"lambda_c (root)   = {lam:.12g}"]
        allow = max(fit.ci95, 0.05 * abs(lam) + float(run.sc.eigen.get("h_allowance", 0.0)))
        ok &= abs(fit.rate - lam) <= allow
        rows = [(fit.rate, fit.ci95, lam, fit.n_points)]
    run.write(f"eigen_{route}.csv", EIGEN_HEADERS[route], rows, f"eigen:{route}", mc=(route == "mc"))
    print("\n".join(lines))
    if route in ("power", "both") and run.args.check and mats.N <= DENSE_LIMIT:
        rep = asymptotic_decay_check(mats, eig, mats.ss.sample(run.g), np.linspace(0.5, 10.0, 20), eps)
        print(f"decay slope {rep.slope:.4g} vs -epsilon {-eps:.4g}: {'ok' if rep.passed else 'FAILED'}")
        ok &= rep.passed
    return 0 if (ok or not run.args.check) else 1


COMPARE_HEADER = ["t", "psi", "psi_stderr", "phi", "phi_stderr", "deterministic",
                  "z_psi_phi", "z_psi_det", "z_phi_det"]


def _z(a, b, se):
    return (a - b) / se if se > 0 else (0.0 if a == b else math.copysign(math.inf, a - b))


def cmd_compare(run):
    psi = run.psi()
    phi = run.phi()
    det, _ = run.deterministic()
    rows = []
    worst = 0.0
    print(f"{'t':>6} {'psi':>12} {'phi':>12} {'V_t g':>12} {'z(psi,phi)':>11} {'z(psi,V)':>9} {'z(phi,V)':>9}")
    for a, b, v in zip(psi, phi, det):
        z1 = _z(a.mean, b.mean, math.hypot(a.stderr, b.stderr))
        z2 = _z(a.mean, v, a.stderr)
        z3 = _z(b.mean, v, b.stderr)
        worst = max(worst, abs(z1), abs(z2), abs(z3))
        rows.append((a.t, a.mean, a.stderr, b.mean, b.stderr, v, z1, z2, z3))
        print(f"{a.t:6g} {a.mean:12.6g} {b.mean:12.6g} {v:12.6g} {z1:11.3f} {z2:9.3f} {z3:9.3f}")
    run.write("compare.csv", COMPARE_HEADER, rows, "compare", mc=True)
    print(f"max |z| = {worst:.3f}")
    return 1 if run.args.check and worst > Z_LIMIT else 0


HELP = {"validate": "check a scenario's library for structural errors",
        "branch": "estimate the tally with the branching process",
        "walk": "estimate the tally with the weighted random walk",
        "solve": "solve the backward equation on a grid",
        "eigen": "leading eigenvalue by power iteration, root search or MC growth",
        "compare": "run both Monte Carlo routes and the solver side by side"}
ROUTES = {"solve": ("acp", "mild", "expm"), "eigen": ("power", "root", "both", "mc")}

COMMANDS = {"validate": cmd_validate, "branch": cmd_branch, "walk": cmd_walk, "solve": cmd_solve,
            "eigen": cmd_eigen, "compare": cmd_compare}

MODULE_TAG = {"ScenarioError": "config", "StructuralError": "species", "CollapseError": "species",
              "DomainError": "geometry", "PopulationCapError": "branching", "UnsupportedScenario": "walk",
              "CFLError": "semigroup", "PicardError": "semigroup", "ConvergenceError": "eigen",
              "BracketError": "eigen", "LambdaDomainError": "eigen"}


def build_parser():
    ap = argparse.ArgumentParser(prog="mnte", description="Multi-species neutron transport toolkit.")
    ap.add_argument("--version", action="version", version=f"mnte {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("list", help="list the shipped scenarios")
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--scenario", required=True, help="scenario YAML file or shipped scenario name")
        p.add_argument("--out", help="directory for CSV output")
        p.add_argument("--seed", type=int, help="override the scenario seed")
        p.add_argument("--paths", type=int, help="number of Monte Carlo paths")
        p.add_argument("--workers", type=int, help="worker threads for Monte Carlo")
        p.add_argument("--check", action="store_true", help="exit nonzero if a built-in check fails")
        if name in ("solve", "eigen"):
            p.add_argument("--route", help="one of " + ", ".join(ROUTES[name]) + " (default from the scenario)")
        if name == "solve":
            p.add_argument("--grid", action="store_true", help="also write the full grid function")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "list":
        for name in BUILTIN:
            print(f"{name:12s} {DATA_DIR / (name + '.yaml')}")
        return 0
    try:
        run = Run(args)
        return COMMANDS[args.command](run)
    except Exception as exc:  # surface module errors with a tag, not a traceback
        tag = MODULE_TAG.get(type(exc).__name__)
        if tag is None and not isinstance(exc, (ValueError, RuntimeError, OSError, KeyError, IndexError)):
            raise
        print(f"mnte [{tag or type(exc).__name__}]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
