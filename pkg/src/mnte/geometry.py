"""Convex domains, exit times, advection and ray tracing through voxel meshes."""
from dataclasses import dataclass

import numpy as np

from . import tracking


class DomainError(ValueError):
    """Raised when a point handed to a geometric query lies outside D."""


_KINDS = {"slab": tracking.SLAB, "box": tracking.BOX, "ball": tracking.BALL}


@dataclass(frozen=True)
class Domain:
    """Open convex region: ``slab`` (x-interval), axis-aligned ``box`` or ``ball``.

    For a slab only the x coordinate matters; y and z are unbounded.
    """

    shape: str
    params: tuple

    def __post_init__(self):
        if self.shape not in _KINDS:
            raise ValueError(f"unknown domain shape {self.shape!r}")
        p = tuple(float(v) for v in self.params)
        need = {"slab": 2, "box": 6, "ball": 4}[self.shape]
        if len(p) != need:
            raise ValueError(f"{self.shape} needs {need} parameters, got {len(p)}")
        if self.shape == "slab" and not p[0] < p[1]:
            raise ValueError("slab needs a < b")
        if self.shape == "box" and not all(p[d] < p[3 + d] for d in range(3)):
            raise ValueError("box needs lo < hi on every axis")
        if self.shape == "ball" and not p[3] > 0:
            raise ValueError("ball radius must be positive")
        object.__setattr__(self, "params", p)

    @classmethod
    def slab(cls, a, b):
        return cls("slab", (a, b))

    @classmethod
    def box(cls, lo, hi):
        return cls("box", tuple(lo) + tuple(hi))

    @classmethod
    def ball(cls, center, radius):
        return cls("ball", tuple(center) + (radius,))

    @property
    def kind(self):
        return _KINDS[self.shape]

    @property
    def param_array(self):
        a = np.zeros(6)
        a[: len(self.params)] = self.params
        return a

    @property
    def bounded_axes(self):
        return (0,) if self.shape == "slab" else (0, 1, 2)

    def bbox(self):
        """(lo, hi) of the bounding box; infinite on unbounded slab axes."""
        p = self.params
        if self.shape == "slab":
            return np.array([p[0], -np.inf, -np.inf]), np.array([p[1], np.inf, np.inf])
        if self.shape == "box":
            return np.array(p[:3]), np.array(p[3:])
        c = np.array(p[:3])
        return c - p[3], c + p[3]

    def contains(self, r):
        r = np.asarray(r, dtype=float)
        return bool(tracking.inside_nb(self.kind, self.param_array, r[0], r[1], r[2]))

    def to_dict(self):
        return {"shape": self.shape, "params": list(self.params)}


def _point(r):
    r = np.zeros(3) + np.asarray(r, dtype=float)
    return r


def exit_time(domain, r, v):
    """Exact first exit time of r + t v from the open domain (inf if v = 0)."""
    r = _point(r)
    v = _point(v)
    if not domain.contains(r):
        raise DomainError(f"point {r.tolist()} is not inside the {domain.shape}")
    return float(tracking.exit_time_nb(domain.kind, domain.param_array, r[0], r[1], r[2], v[0], v[1], v[2]))


@dataclass(frozen=True)
class Inside:
    position: np.ndarray


@dataclass(frozen=True)
class Exited:
    kappa: float


def advect(domain, r, v, t):
    """Free streaming for time t, or the exit time if the boundary comes first."""
    kappa = exit_time(domain, r, v)
    if t < kappa:
        return Inside(_point(r) + t * _point(v))
    return Exited(kappa)


@dataclass(frozen=True)
class RaySegmentation:
    """Cells crossed by a ray, with entry and exit times along it."""

    cells: np.ndarray
    t_in: np.ndarray
    t_out: np.ndarray

    def __len__(self):
        return len(self.cells)

    @property
    def lengths(self):
        return self.t_out - self.t_in

    @property
    def end(self):
        return float(self.t_out[-1]) if len(self.cells) else 0.0

    def integrate(self, cell_values):
        """Integral over the ray of a piecewise-constant per-cell field."""
        return float(np.dot(np.asarray(cell_values)[self.cells], self.lengths))


def trace_segments(mesh, domain, r, v, t):
    r = _point(r)
    v = _point(v)
    if not domain.contains(r):
        raise DomainError(f"point {r.tolist()} is not inside the {domain.shape}")
    if not t > 0:
        raise ValueError("trace_segments needs t > 0")
    cells, t_in, t_out = tracking.segments_nb(
        domain.kind, domain.param_array, mesh.lo, mesh.h, mesh.shape_array, r, v, float(t))
    return RaySegmentation(cells, t_in, t_out)
