"""Library and scenario files (YAML).

Species numbers in files are 1-based.  A library file looks like::

    name: demo
    species: {m: 3, ell: 2}
    n_max: 4
    velocities:
      v_min: 0.5
      v_max: 2.5
      table: [[vx, vy, vz, w], ...]
    mesh: {cells: [4, 1, 1]}
    kernel_form: mass          # kernels given as pi * w (mass) or as densities
    decay: [1.0]               # lambda for species ell+1..m
    materials:
      fuel:
        sigma_s: {1: [K values], 2: [...]}
        sigma_f: {1: [...], 2: [...]}
        pi_s: {1: [[K x K]], 2: [[K x K]]}
        pi_f: {"1>1": [[K x K]], "3>1": [[K x K]], ...}
        m_yield: {3: [K values]}
    material_map: [moderator, fuel, fuel, moderator]

The mesh covers the bounding box of the scenario's domain, so a library is
loaded against a domain.
"""
import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import yaml

from .geometry import Domain
from .species import CrossSectionLibrary, SpatialMesh, SpeciesLayout, StructuralError, VelocityTable
from .tally import TallyFunction

DATA_DIR = Path(__file__).with_name("data")


class ScenarioError(ValueError):
    """Invalid scenario file; the message names the offending field."""


def _species_key(key, m, what):
    i = int(key)
    if not 1 <= i <= m:
        raise StructuralError(f"{what}: species {i} out of range 1..{m}")
    return i - 1


def library_from_dict(d, domain):
    lay = SpeciesLayout(int(d["species"]["m"]), int(d["species"]["ell"]))
    m, ell = lay.m, lay.ell
    vt_rows = np.array(d["velocities"]["table"], dtype=float)
    if vt_rows.ndim != 2 or vt_rows.shape[1] != 4:
        raise StructuralError("velocity table rows must be (vx, vy, vz, w)")
    vt = VelocityTable(vt_rows[:, :3], vt_rows[:, 3], float(d["velocities"]["v_min"]),
                       float(d["velocities"]["v_max"]))
    K = vt.K
    mesh = SpatialMesh(domain, tuple(d["mesh"]["cells"]))
    form = d.get("kernel_form", "mass")
    if form not in ("mass", "density"):
        raise StructuralError(f"kernel_form must be 'mass' or 'density', got {form!r}")
    scale = (1.0 / vt.weights) if form == "mass" else np.ones(K)

    mats = {}
    for name, md in d["materials"].items():
        ss = np.zeros((m, K))
        sf = np.zeros((m, K))
        ps = np.zeros((m, K, K))
        pf = np.zeros((m, ell, K, K))
        my = np.zeros((m, K))
        for key, row in (md.get("sigma_s") or {}).items():
            ss[_species_key(key, m, "sigma_s")] = row
        for key, row in (md.get("sigma_f") or {}).items():
            sf[_species_key(key, m, "sigma_f")] = row
        for key, mat in (md.get("pi_s") or {}).items():
            ps[_species_key(key, m, "pi_s")] = np.array(mat, dtype=float) * scale
        for key, mat in (md.get("pi_f") or {}).items():
            a, b = str(key).split(">")
            i = _species_key(a, m, "pi_f")
            j = _species_key(b, m, "pi_f")
            if j >= ell:
                raise StructuralError(f"pi_f {key}: emitted species must be prompt")
            pf[i, j] = np.array(mat, dtype=float) * scale
        for key, row in (md.get("m_yield") or {}).items():
            my[_species_key(key, m, "m_yield")] = row
        mats[name] = (ss, sf, ps, pf, my)

    cmap = d["material_map"]
    if isinstance(cmap, str):
        cmap = [cmap] * mesh.n_cells
    if len(cmap) != mesh.n_cells:
        raise StructuralError(f"material_map has {len(cmap)} entries for {mesh.n_cells} cells")
    try:
        per_cell = [mats[name] for name in cmap]
    except KeyError as exc:
        raise StructuralError(f"material_map names unknown material {exc}") from None
    stack = [np.stack([pc[q] for pc in per_cell], axis=1) for q in range(5)]
    lam = np.zeros(m)
    decay = d.get("decay") or []
    if len(decay) != m - ell:
        raise StructuralError(f"decay needs {m - ell} rates, got {len(decay)}")
    lam[ell:] = decay
    return CrossSectionLibrary(lay, vt, mesh, stack[0], stack[1], stack[2],
                               stack[3].transpose(0, 2, 1, 3, 4), stack[4], lam,
                               int(d["n_max"]), name=d.get("name", "library"))


def load_library(path, domain):
    with open(path) as fh:
        return library_from_dict(yaml.safe_load(fh), domain)


@dataclass
class Scenario:
    library: str
    domain: dict
    source: dict
    g: dict
    t_grid: list
    n_paths: int = 100000
    seed: int = 1
    workers: int = 1
    cap: int = 10_000_000
    solver: dict = field(default_factory=dict)
    eigen: dict = field(default_factory=dict)
    name: str = "scenario"
    base_dir: str = field(default=".", compare=False)

    def to_dict(self):
        d = asdict(self)
        d.pop("base_dir")
        return d

    def digest(self):
        """Short content hash used in CSV provenance lines."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # resolved objects ------------------------------------------------
    def build_domain(self):
        return Domain(self.domain["shape"], tuple(self.domain["params"]))

    def library_path(self):
        p = Path(self.library)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def load(self):
        """(domain, library, tally function, source particle)."""
        from .branching import make_particle
        dom = self.build_domain()
        lib = load_library(self.library_path(), dom)
        g = self.build_g(lib)
        src = make_particle(lib, self.source["species"] - 1, self.source["position"],
                            self.source["velocity"] - 1)
        return dom, lib, g, src

    def build_g(self, lib):
        gd = self.g
        m, K = lib.m, lib.K
        kind = gd.get("kind", "constant")
        if "coef" in gd:
            coef = np.array(gd["coef"], dtype=float)
        else:
            coef = np.zeros((m, K))
            for s in gd.get("species", range(1, m + 1)):
                coef[s - 1] = float(gd.get("value", 1.0))
        if kind in ("constant", "table"):
            return TallyFunction.table(coef)
        if kind == "sine":
            return TallyFunction.sine(coef, self.build_domain())
        if kind == "indicator":
            return TallyFunction.indicator(coef, gd["lo"], gd["hi"])
        if kind == "file":
            path = Path(gd["path"])
            path = path if path.is_absolute() else Path(self.base_dir) / path
            return TallyFunction.grid(lib.mesh, read_grid_csv(path, (m, lib.n_cells, K)))
        raise ScenarioError(f"g.kind: unknown kind {kind!r}")


_REQUIRED = ("library", "domain", "source", "g", "t_grid")


def scenario_from_dict(d, base_dir="."):
    if not isinstance(d, dict):
        raise ScenarioError("scenario file must be a mapping")
    for key in _REQUIRED:
        if key not in d:
            raise ScenarioError(f"{key}: missing required field")
    known = set(Scenario.__dataclass_fields__) - {"base_dir"}
    extra = set(d) - known
    if extra:
        raise ScenarioError(f"{sorted(extra)[0]}: unknown field")
    sc = Scenario(**{k: v for k, v in d.items()}, base_dir=str(base_dir))
    validate_scenario(sc)
    return sc


def validate_scenario(sc):
    t = np.asarray(sc.t_grid, dtype=float)
    if t.ndim != 1 or t.size == 0:
        raise ScenarioError("t_grid: must be a non-empty list")
    if np.any(t < 0):
        raise ScenarioError("t_grid: times must be non-negative")
    if np.any(np.diff(t) == 0):
        raise ScenarioError("t_grid: duplicate time values")
    if np.any(np.diff(t) < 0):
        raise ScenarioError("t_grid: times must be strictly increasing")
    if int(sc.n_paths) < 1:
        raise ScenarioError("n_paths: must be at least 1")
    try:
        dom = sc.build_domain()
    except (KeyError, ValueError, TypeError) as exc:
        raise ScenarioError(f"domain: {exc}") from None
    for key in ("species", "position", "velocity"):
        if key not in sc.source:
            raise ScenarioError(f"source.{key}: missing required field")
    try:
        lib = load_library(sc.library_path(), dom)
    except FileNotFoundError:
        raise ScenarioError(f"library: file {sc.library_path()} not found") from None
    if not 1 <= int(sc.source["species"]) <= lib.m:
        raise ScenarioError(f"source.species: {sc.source['species']} out of range 1..{lib.m}")
    if not 1 <= int(sc.source["velocity"]) <= lib.K:
        raise ScenarioError(f"source.velocity: {sc.source['velocity']} out of range 1..{lib.K}")
    if not dom.contains(sc.source["position"]):
        raise ScenarioError("source.position: not inside the domain")
    for s in sc.g.get("species", []):
        if not 1 <= int(s) <= lib.m:
            raise ScenarioError(f"g.species: {s} out of range 1..{lib.m}")
    h = sc.solver.get("h")
    if h is not None and not float(h) > 0:
        raise ScenarioError("solver.h: must be positive")


def parse_scenario(path):
    path = Path(path)
    try:
        with open(path) as fh:
            d = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark is not None else "file"
        raise ScenarioError(f"{where}: YAML parse error: {exc}") from None
    return scenario_from_dict(d, base_dir=path.parent)


def dump_scenario(sc, path):
    with open(path, "w") as fh:
        yaml.safe_dump(sc.to_dict(), fh, sort_keys=False)


def builtin_scenario(name):
    return parse_scenario(DATA_DIR / f"{name}.yaml")


BUILTIN = ("homogeneous", "slab_sub", "slab_near", "slab_super", "box3d")


# ---------------------------------------------------------------- CSV helpers

def fmt(x):
    return format(float(x), ".17g")


def write_csv(path, header, rows, provenance):
    """Header row, one '#' provenance line, then rows with 17 significant digits."""
    lines = [",".join(header), "# " + provenance]
    for row in rows:
        lines.append(",".join(str(v) if isinstance(v, (int, np.integer)) else fmt(v) for v in row))
    text = "\n".join(lines) + "\n"
    Path(path).write_text(text)
    return text


def read_grid_csv(path, shape):
    """Grid function rows (i, c, k, value) with 1-based i, c, k."""
    out = np.zeros(shape)
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line[0].isalpha():
                continue
            i, c, k, v = line.split(",")
            out[int(i) - 1, int(c) - 1, int(k) - 1] = float(v)
    return out


def grid_rows(ss, u):
    f = ss.reshape(u)
    for i in range(ss.m):
        for a in range(ss.n_active):
            for k in range(ss.K):
                yield (i + 1, int(ss.active[a]) + 1, k + 1, f[i, a, k])
