"""Tally functions g(i, r, k), Monte Carlo estimates and the path-batch driver."""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tracking


@dataclass(frozen=True)
class TallyFunction:
    """Bounded non-negative g on species x D x velocity index.

    ``coef[i, k]`` scales a spatial profile: ``constant``, ``sine`` (product
    of half-wave sines over the bounded axes of ``box``, vanishing on its
    faces), or ``indicator`` of the half-open ``box``.  ``grid`` instead reads
    ``values[i, c, k]`` on ``mesh``.
    """

    kind: str
    coef: np.ndarray
    box: tuple = None
    values: np.ndarray = None
    mesh: object = None

    _CODES = {"constant": tracking.G_CONST, "sine": tracking.G_SINE,
              "grid": tracking.G_GRID, "indicator": tracking.G_BOX}

    def __post_init__(self):
        if self.kind not in self._CODES:
            raise ValueError(f"unknown tally kind {self.kind!r}")
        object.__setattr__(self, "coef", np.array(self.coef, dtype=float))
        if self.kind == "grid":
            if self.values is None or self.mesh is None:
                raise ValueError("grid tally needs values and a mesh")
            object.__setattr__(self, "values", np.array(self.values, dtype=float))
        if self.kind in ("sine", "indicator") and self.box is None:
            raise ValueError(f"{self.kind} tally needs a box")
        vals = self.values if self.kind == "grid" else self.coef
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ValueError("tally function must be finite and non-negative")

    @classmethod
    def constant(cls, m, K, value=1.0):
        return cls("constant", np.full((m, K), float(value)))

    @classmethod
    def table(cls, coef):
        return cls("constant", coef)

    @classmethod
    def sine(cls, coef, domain):
        lo, hi = domain.bbox()
        return cls("sine", coef, box=tuple(lo) + tuple(hi))

    @classmethod
    def indicator(cls, coef, lo, hi):
        return cls("indicator", coef, box=tuple(float(x) for x in lo) + tuple(float(x) for x in hi))

    @classmethod
    def grid(cls, mesh, values):
        return cls("grid", np.ones(np.shape(values)[::2]), values=values, mesh=mesh)

    @property
    def m(self):
        return self.coef.shape[0]

    def packed(self):
        """Argument tuple consumed by tracking.g_eval."""
        if self.kind == "grid":
            mesh = self.mesh
            return (self._CODES["grid"], self.coef, self.values, mesh.lo, mesh.h,
                    mesh.shape_array, np.zeros(6))
        box = np.array(self.box if self.box is not None else (0.0,) * 6, dtype=float)
        return (self._CODES[self.kind], self.coef, np.zeros((1, 1, 1)), np.zeros(3),
                np.ones(3), np.ones(3, dtype=np.int64), box)

    def __call__(self, i, r, k):
        r = np.zeros(3) + np.asarray(r, dtype=float)
        return float(tracking.g_eval(*self.packed(), int(i), int(k), r[0], r[1], r[2]))

    def sup_norm(self):
        return float(np.max(self.values if self.kind == "grid" else self.coef))

    def on_points(self, points, m, K):
        """Evaluate on a set of positions for every (i, k): array (m, P, K)."""
        pk = self.packed()
        out = np.empty((m, len(points), K))
        for i in range(m):
            for p, r in enumerate(points):
                for k in range(K):
                    out[i, p, k] = tracking.g_eval(*pk, i, k, r[0], r[1], r[2])
        return out

    def to_dict(self):
        d = {"kind": self.kind, "coef": self.coef.tolist()}
        if self.box is not None:
            d["box"] = list(self.box)
        return d


@dataclass(frozen=True)
class TallyEstimate:
    """Mean and standard error of a tally over independent paths at time t."""

    mean: float
    stderr: float
    n_paths: int
    t: float
    samples: np.ndarray = field(default=None, repr=False, compare=False)

    @classmethod
    def from_samples(cls, x, t):
        x = np.asarray(x, dtype=float)
        n = x.shape[0]
        sd = float(np.std(x, ddof=1)) if n > 1 else 0.0
        return cls(float(np.mean(x)), sd / np.sqrt(n), n, float(t), x)


def check_t_grid(t_grid):
    t = np.atleast_1d(np.asarray(t_grid, dtype=float))
    if t.ndim != 1 or t.size == 0:
        raise ValueError("t grid must be a non-empty 1-D sequence")
    if np.any(t < 0) or np.any(np.diff(t) <= 0):
        raise ValueError("t grid must be non-negative and strictly increasing")
    return t


def run_batches(kernel, n_paths, n_t, workers, args):
    """Run ``kernel(start, stop, out, status, *args)`` over contiguous path chunks.

    Every path writes its own row of ``out`` so the reduction order, and hence
    every printed digit, is independent of ``workers``.
    """
    out = np.zeros((n_paths, n_t))
    status = np.zeros(n_paths, dtype=np.int64)
    workers = max(1, int(workers))
    if workers == 1 or n_paths < 2 * workers:
        kernel(0, n_paths, out, status, *args)
    else:
        edges = np.linspace(0, n_paths, workers + 1).astype(np.int64)
        with ThreadPoolExecutor(max_workers=workers) as ex:
            futs = [ex.submit(kernel, int(a), int(b), out, status, *args)
                    for a, b in zip(edges[:-1], edges[1:]) if b > a]
            for f in futs:
                f.result()
    return out, status


def summarize(out, t_grid):
    return [TallyEstimate.from_samples(out[:, j], t) for j, t in enumerate(t_grid)]
