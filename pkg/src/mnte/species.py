"""Species layout, velocity table, voxel mesh and cross-section library.

Species are indexed from 0 internally: prompt types are 0..ell-1 and delayed
isotopes ell..m-1.  Files, the CLI and CSV output use 1-based numbering.

Kernel densities follow the weighted convention: a row pi[k, :] is a density
with respect to the velocity weights, so its mass is sum_k' pi[k, k'] w[k'].
"""
from dataclasses import dataclass, field

import numpy as np

NORM_TOL = 1e-12


class StructuralError(ValueError):
    """Array shapes do not match the layout, mesh or velocity table."""


class CollapseError(ValueError):
    """Zero total jump rate with a nonzero jump numerator."""


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SpeciesLayout:
    m: int
    ell: int

    def __post_init__(self):
        if not 1 <= self.ell <= self.m:
            raise StructuralError(f"need 1 <= ell <= m, got ell={self.ell}, m={self.m}")

    @property
    def prompt(self):
        return range(self.ell)

    @property
    def delayed(self):
        return range(self.ell, self.m)

    def is_prompt(self, i):
        return 0 <= i < self.ell

    @property
    def n_delayed(self):
        return self.m - self.ell


@dataclass(frozen=True)
class VelocityTable:
    """Finite velocity set with quadrature weights over the annulus [v_min, v_max]."""

    velocities: np.ndarray
    weights: np.ndarray
    v_min: float
    v_max: float

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.velocities, dtype=float))
        w = np.asarray(self.weights, dtype=float).ravel()
        if v.shape[1] != 3 or v.shape[0] != w.shape[0] or v.shape[0] == 0:
            raise StructuralError("velocity table needs K rows of (vx, vy, vz) and K weights")
        object.__setattr__(self, "velocities", _frozen(v))
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def K(self):
        return self.weights.shape[0]

    @property
    def speeds(self):
        return np.linalg.norm(self.velocities, axis=1)

    @property
    def volume(self):
        return 4.0 / 3.0 * np.pi * (self.v_max ** 3 - self.v_min ** 3)


@dataclass(frozen=True)
class SpatialMesh:
    """Regular voxel mesh over the bounding box of a domain.

    Slab domains have exactly one cell along y and z.
    """

    domain: object
    shape: tuple

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        if len(shape) != 3 or min(shape) < 1:
            raise StructuralError(f"mesh shape must be three positive counts, got {self.shape}")
        if self.domain.shape == "slab" and shape[1:] != (1, 1):
            raise StructuralError("slab meshes have a single cell along y and z")
        object.__setattr__(self, "shape", shape)

    @property
    def shape_array(self):
        return np.array(self.shape, dtype=np.int64)

    @property
    def lo(self):
        return self.domain.bbox()[0]

    @property
    def hi(self):
        return self.domain.bbox()[1]

    @property
    def h(self):
        lo, hi = self.domain.bbox()
        h = np.full(3, np.inf)
        for d in self.domain.bounded_axes:
            h[d] = (hi[d] - lo[d]) / self.shape[d]
        return h

    @property
    def n_cells(self):
        return self.shape[0] * self.shape[1] * self.shape[2]

    @property
    def cell_volume(self):
        h = self.h
        return float(np.prod([h[d] for d in self.domain.bounded_axes]))

    def index(self, ix, iy, iz):
        nx, ny, _ = self.shape
        return ix + nx * (iy + ny * iz)

    def unravel(self, c):
        nx, ny, _ = self.shape
        c = np.asarray(c)
        return c % nx, (c // nx) % ny, c // (nx * ny)

    def centers(self):
        """(N_c, 3) cell centers; unbounded axes report 0."""
        ix, iy, iz = self.unravel(np.arange(self.n_cells))
        lo, h = self.lo, self.h
        out = np.zeros((self.n_cells, 3))
        for d, idx in enumerate((ix, iy, iz)):
            if np.isfinite(h[d]):
                out[:, d] = lo[d] + (idx + 0.5) * h[d]
        return out

    def locate(self, r, v=(0.0, 0.0, 0.0)):
        from .tracking import locate_nb
        r = np.zeros(3) + np.asarray(r, dtype=float)
        v = np.zeros(3) + np.asarray(v, dtype=float)
        cell = np.zeros(3, dtype=np.int64)
        return int(locate_nb(self.lo, self.h, self.shape_array, r[0], r[1], r[2], v[0], v[1], v[2], cell))

    def refine(self, factors):
        factors = tuple(int(f) for f in factors)
        return SpatialMesh(self.domain, tuple(n * f for n, f in zip(self.shape, factors)))

    def parent_map(self, coarse):
        """Index of the cell of ``coarse`` containing each cell of this mesh."""
        f = [a // b for a, b in zip(self.shape, coarse.shape)]
        if any(a != b * q for a, b, q in zip(self.shape, coarse.shape, f)):
            raise StructuralError(f"mesh {self.shape} does not refine {coarse.shape}")
        ix, iy, iz = self.unravel(np.arange(self.n_cells))
        return coarse.index(ix // f[0], iy // f[1], iz // f[2])


@dataclass(frozen=True)
class CrossSectionLibrary:
    """All rates and kernels, tabulated per (species, cell, velocity)."""

    layout: SpeciesLayout
    vtable: VelocityTable
    mesh: SpatialMesh
    sigma_s: np.ndarray        # (m, Nc, K)
    sigma_f: np.ndarray        # (m, Nc, K)
    pi_s: np.ndarray           # (m, Nc, K, K)
    pi_f: np.ndarray           # (m, ell, Nc, K, K)
    m_yield: np.ndarray        # (m, Nc, K); rows j < ell are zero
    lambda_delay: np.ndarray   # (m,); entries i < ell are zero
    n_max: int
    name: str = field(default="library", compare=False)

    def __post_init__(self):
        m, ell = self.layout.m, self.layout.ell
        nc, K = self.mesh.n_cells, self.vtable.K
        want = {
            "sigma_s": (m, nc, K), "sigma_f": (m, nc, K), "pi_s": (m, nc, K, K),
            "pi_f": (m, ell, nc, K, K), "m_yield": (m, nc, K), "lambda_delay": (m,),
        }
        for name, shape in want.items():
            a = np.asarray(getattr(self, name), dtype=float)
            if a.shape != shape:
                raise StructuralError(f"{name} has shape {a.shape}, expected {shape}")
            object.__setattr__(self, name, _frozen(a))
        object.__setattr__(self, "n_max", int(self.n_max))

    @property
    def m(self):
        return self.layout.m

    @property
    def ell(self):
        return self.layout.ell

    @property
    def K(self):
        return self.vtable.K

    @property
    def n_cells(self):
        return self.mesh.n_cells

    def event_rates(self):
        """(m, Nc, K) total event rate: sigma_s + sigma_f prompt, lambda delayed."""
        out = self.sigma_s + self.sigma_f
        for i in self.layout.delayed:
            out[i] = self.lambda_delay[i]
        return out

    def fission_masses(self):
        """pi_f * w, i.e. mean offspring counts per (i, j, c, k, k') channel."""
        return self.pi_f * self.vtable.weights

    def with_mesh(self, mesh):
        """Same data on a refinement of the mesh."""
        parent = mesh.parent_map(self.mesh)
        return CrossSectionLibrary(
            self.layout, self.vtable, mesh,
            self.sigma_s[:, parent], self.sigma_f[:, parent], self.pi_s[:, parent],
            self.pi_f[:, :, parent], self.m_yield[:, parent], self.lambda_delay,
            self.n_max, name=self.name)

    def replace(self, **changes):
        kw = {f: getattr(self, f) for f in (
            "layout", "vtable", "mesh", "sigma_s", "sigma_f", "pi_s", "pi_f",
            "m_yield", "lambda_delay", "n_max", "name")}
        kw.update(changes)
        return CrossSectionLibrary(**kw)


@dataclass(frozen=True)
class Violation:
    rule: str
    where: tuple
    detail: str

    def __str__(self):
        return f"{self.rule} at {self.where}: {self.detail}"


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def rules(self):
        return {v.rule for v in self.violations}

    def add(self, rule, where, detail):
        self.violations.append(Violation(rule, tuple(int(x) for x in where), detail))

    def __str__(self):
        if self.ok:
            return "library valid"
        return "\n".join(str(v) for v in self.violations)


def _flag_all(report, rule, mask, detail, offset=None):
    for idx in zip(*np.nonzero(mask)):
        idx = tuple(int(x) for x in idx)
        if offset is not None:
            idx = offset(idx)
        report.add(rule, idx, detail)


def validate_library(lib):
    """Check every standing assumption; coordinates are 0-based (i, [j,] c, k[, k'])."""
    rep = ValidationReport()
    lay, vt = lib.layout, lib.vtable
    ell, m = lay.ell, lay.m
    w = vt.weights

    sp = vt.speeds
    if not 0 < vt.v_min <= vt.v_max < np.inf:
        rep.add("velocity_bounds", (), f"need 0 < v_min <= v_max < inf, got {vt.v_min}, {vt.v_max}")
    _flag_all(rep, "speed_range", (sp < vt.v_min * (1 - NORM_TOL)) | (sp > vt.v_max * (1 + NORM_TOL)),
              "speed outside [v_min, v_max]")
    _flag_all(rep, "weight_positive", ~(w > 0), "velocity weight must be positive")
    if abs(w.sum() - vt.volume) > NORM_TOL * vt.volume:
        rep.add("weight_volume", (), f"sum of weights {w.sum():.17g} != annulus volume {vt.volume:.17g}")

    for name in ("sigma_s", "sigma_f", "pi_s", "pi_f", "m_yield", "lambda_delay"):
        a = getattr(lib, name)
        _flag_all(rep, "finite_nonnegative", ~(np.isfinite(a) & (a >= 0)), f"{name} entry negative or not finite")

    if m > ell:
        for name in ("sigma_s", "sigma_f", "pi_s"):
            a = getattr(lib, name)[ell:]
            _flag_all(rep, "delayed_inactive", a != 0, f"{name} must vanish for delayed species",
                      offset=lambda idx: (idx[0] + ell,) + idx[1:])
    _flag_all(rep, "prompt_isotope_yield", lib.m_yield[:ell] != 0, "m_yield is only defined for delayed types")
    _flag_all(rep, "prompt_decay", lib.lambda_delay[:ell] != 0, "lambda_delay is only defined for delayed types")

    mass_s = (lib.pi_s[:ell] * w).sum(axis=-1)
    _flag_all(rep, "scatter_normalization", np.abs(mass_s - 1.0) > NORM_TOL,
              "weighted pi_s row does not sum to 1")
    comp = lib.sigma_s[:ell, :, :, None] * lib.pi_s[:ell]
    _flag_all(rep, "scatter_positive", ~(comp > 0), "sigma_s * pi_s must be bounded away from 0")

    yld = lib.fission_masses().sum(axis=(1, 4))
    _flag_all(rep, "yield_cap", yld > lib.n_max, f"mean fission yield exceeds n_max = {lib.n_max}")
    _flag_all(rep, "yield_cap", lib.m_yield > lib.n_max, f"isotope yield exceeds n_max = {lib.n_max}")

    if m > ell:
        prod = lib.sigma_f[0][None] * lib.m_yield[ell:]
        _flag_all(rep, "isotope_production", ~(prod > 0), "sigma_f of type 1 times m_yield must be positive",
                  offset=lambda idx: (idx[0] + ell,) + idx[1:])
        lam = lib.lambda_delay[ell:]
        if not lam[0] > 0:
            rep.add("decay_positive", (ell,), "decay rates must be positive")
        for a in range(len(lam) - 1):
            if not lam[a] < lam[a + 1]:
                rep.add("decay_ordering", (ell + a, ell + a + 1),
                        f"need lambda increasing, got {lam[a]} then {lam[a + 1]}")
    return rep


def total_rate(lib, i, c, k):
    """Total event rate of a type-i particle in cell c with velocity k."""
    if not (0 <= i < lib.m and 0 <= c < lib.n_cells and 0 <= k < lib.K):
        raise IndexError(f"index (i={i}, c={c}, k={k}) out of range")
    if lib.layout.is_prompt(i):
        return float(lib.sigma_s[i, c, k] + lib.sigma_f[i, c, k])
    return float(lib.lambda_delay[i])


def kernel_k(lib, i, j, c, k, k2):
    """Gain-kernel entry from type j at velocity k2 into type i at velocity k.

    Prompt rows combine scatter (only when i == j) and fission; delayed rows
    carry the decay emission lambda_i * pi_f.  Isotope production is not part
    of this kernel.
    """
    if not (0 <= i < lib.m and 0 <= j < lib.m and 0 <= c < lib.n_cells
            and 0 <= k < lib.K and 0 <= k2 < lib.K):
        raise IndexError("kernel index out of range")
    if j >= lib.ell:
        return 0.0
    if lib.layout.is_prompt(i):
        val = lib.sigma_f[i, c, k] * lib.pi_f[i, j, c, k, k2]
        if i == j:
            val += lib.sigma_s[i, c, k] * lib.pi_s[i, c, k, k2]
        return float(val)
    return float(lib.lambda_delay[i] * lib.pi_f[i, j, c, k, k2])


@dataclass(frozen=True)
class CollapsedKernel:
    """Single-walker jump rate alpha, jump law pi and potential beta."""

    layout: SpeciesLayout
    vtable: VelocityTable
    mesh: SpatialMesh
    alpha: np.ndarray   # (m, Nc, K)
    pi: np.ndarray      # (m, m, Nc, K, K)
    beta: np.ndarray    # (m, Nc, K)

    def __post_init__(self):
        for name in ("alpha", "pi", "beta"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @property
    def beta_bar(self):
        return float(self.beta.max())

    def jump_masses(self):
        """pi * w reshaped to (m, Nc, K, m*K): the walker's jump distribution."""
        m, nc, K = self.alpha.shape
        p = self.pi * self.vtable.weights
        return np.ascontiguousarray(p.transpose(0, 2, 3, 1, 4).reshape(m, nc, K, m * K))

    def replace(self, **changes):
        kw = dict(layout=self.layout, vtable=self.vtable, mesh=self.mesh,
                  alpha=self.alpha, pi=self.pi, beta=self.beta)
        kw.update(changes)
        return CollapsedKernel(**kw)


def _excess(y):
    """y - 1, with a unit yield lost to density/weight round-off mapped to exactly 0."""
    dy = y - 1.0
    return np.where(np.abs(dy) <= 8 * np.finfo(float).eps, 0.0, dy)


def collapse(lib):
    """Rewrite scatter, fission, isotope production and decay as one jump process.

    A (i, c, k) with zero jump rate gets a self-loop so the jump law stays a
    probability distribution; such a state simply never jumps.
    """
    lay, w = lib.layout, lib.vtable.weights
    m, ell, nc, K = lay.m, lay.ell, lib.n_cells, lib.K
    num = np.zeros((m, m, nc, K, K))
    eye_w = np.eye(K) / w[:, None]          # delta_{kk'} / w_k
    for i in lay.prompt:
        num[i, i] += lib.sigma_s[i, :, :, None] * lib.pi_s[i]
        num[i, :ell] += lib.sigma_f[i][None, :, :, None] * lib.pi_f[i]
    for j in lay.delayed:
        num[0, j] += (lib.sigma_f[0] * lib.m_yield[j])[:, :, None] * eye_w[None]
    for i in lay.delayed:
        num[i, :ell] += lib.lambda_delay[i] * lib.pi_f[i]

    # alpha and beta from the rates and total yields, so beta vanishes exactly without fission
    y = (lib.pi_f * w).sum(axis=(1, 4))     # (m, Nc, K) prompt yield per event
    alpha = np.zeros((m, nc, K))
    beta = np.zeros((m, nc, K))
    for i in lay.prompt:
        dy = _excess(y[i] + (lib.m_yield[ell:].sum(axis=0) if i == 0 else 0.0))
        alpha[i] = lib.sigma_s[i] + lib.sigma_f[i] * (1.0 + dy)
        beta[i] = lib.sigma_f[i] * dy
    for i in lay.delayed:
        dy = _excess(y[i])
        alpha[i] = lib.lambda_delay[i] * (1.0 + dy)
        beta[i] = lib.lambda_delay[i] * dy
    zero = alpha == 0
    pi = np.divide(num, alpha[:, None, :, :, None],
                   out=np.zeros_like(num), where=~zero[:, None, :, :, None])
    if zero.any():
        idx = np.argwhere(zero)
        for i, c, k in idx:
            if np.any(num[i, :, c, k, :] != 0):
                raise CollapseError(f"zero jump rate with nonzero jump kernel at (i={i}, c={c}, k={k})")
            pi[i, i, c, k, k] = 1.0 / w[k]

    return CollapsedKernel(lay, lib.vtable, lib.mesh, alpha, pi, beta)
