"""Criticality: leading eigentriple by two independent routes, decay check, MC growth rate.

Route one iterates the evolved semigroup exp(delta A).  Route two works only
with the prompt blocks: lambda_c is the root of r(lambda) = 1 where r is the
spectral radius of (lambda I - T)^-1 K(lambda) and K(lambda) folds the
isotope hold times back into the prompt gains.
"""
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .semigroup import DENSE_LIMIT, evolve_acp


class ConvergenceError(RuntimeError):
    pass


class BracketError(RuntimeError):
    pass


class LambdaDomainError(ValueError):
    pass


@dataclass(frozen=True)
class Blocks:
    """Block form of a generator, for matrices assembled by hand."""

    T_block: object
    Lambda: np.ndarray
    K_circ_top: object
    M_block: object
    K_circ_bottom: object


@dataclass(frozen=True)
class LinearGenerator:
    """Bare (A, A_fwd, weights) triple accepted by leading_eigenpair."""

    A_bwd: object
    weights: np.ndarray
    A_fwd: object = None

    def __post_init__(self):
        A = sp.csr_matrix(self.A_bwd)
        object.__setattr__(self, "A_bwd", A)
        W = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", W)
        if self.A_fwd is None:
            object.__setattr__(self, "A_fwd", (sp.diags(1.0 / W) @ A.T @ sp.diags(W)).tocsr())

    @property
    def N(self):
        return self.A_bwd.shape[0]

    def max_rate(self):
        return float(np.max(np.abs(self.A_bwd.diagonal())))


@dataclass
class Eigensolution:
    lambda_c: float
    phi: np.ndarray
    phi_tilde: np.ndarray = None
    gap: float = None
    iterations: int = 0
    residual: float = None
    residual_adjoint: float = None
    history: list = field(default_factory=list, repr=False)


def _wnorm(W, v):
    return math.sqrt(float(np.sum(W * v * v)))


def _propagator(mats, delta, adjoint, method):
    A = mats.A_fwd if adjoint else mats.A_bwd
    if method == "auto":
        method = "expm" if mats.N <= DENSE_LIMIT else "rk4"
    if method == "expm":
        E = scipy.linalg.expm(delta * A.toarray())
        return lambda v: E @ v
    return lambda v: evolve_acp(mats, v, delta, adjoint=adjoint)


def _power(step, W, v, delta, tol, max_iter):
    v = v / _wnorm(W, v)
    lam_prev = None
    hist = []
    for it in range(1, max_iter + 1):
        u = step(v)
        nu = _wnorm(W, u)
        if not nu > 0:
            raise ConvergenceError("iterate vanished; the semigroup killed the start vector")
        lam = math.log(nu) / delta
        u = u / nu
        dv = float(np.max(np.abs(u - v))) / max(float(np.max(np.abs(u))), 1e-300)
        hist.append(lam)
        v = u
        if lam_prev is not None and abs(lam - lam_prev) < tol and dv < tol:
            return lam, v, it, hist
        lam_prev = lam
    last = hist[-2:] if len(hist) >= 2 else hist
    raise ConvergenceError(f"power iteration did not converge in {max_iter} steps; last eigenvalue iterates {last}")


def leading_eigenpair(mats, delta=1.0, tol=1e-12, max_iter=20000, method="auto", start=None):
    """(lambda_c, phi, phi_tilde) by power iteration on exp(delta A) and exp(delta A_fwd).

    phi has unit weighted norm; phi_tilde is scaled so <phi, phi_tilde> = 1.
    """
    W = np.asarray(mats.weights)
    v0 = np.ones(mats.N) if start is None else np.asarray(start, dtype=float)
    if np.any(v0 <= 0):
        raise ValueError("power iteration needs a strictly positive start vector")
    lam, phi, it, hist = _power(_propagator(mats, delta, False, method), W, v0, delta, tol, max_iter)
    lam_t, phit, it2, _ = _power(_propagator(mats, delta, True, method), W, v0, delta, tol, max_iter)
    if phi.sum() < 0:
        phi = -phi
    if phit.sum() < 0:
        phit = -phit
    phit = phit / float(np.sum(W * phi * phit))
    res = _wnorm(W, mats.A_bwd @ phi - lam * phi) / _wnorm(W, phi)
    res_t = _wnorm(W, mats.A_fwd @ phit - lam * phit) / _wnorm(W, phit)
    return Eigensolution(lam, phi, phit, None, max(it, it2), res, res_t, hist)


def spectral_gap(mats, lambda_c=None):
    """Dense spectrum: (leading eigenvalue, real part of the next one, epsilon bound).

    epsilon = lambda_c - max(Re lambda_2, -lambda_{ell+1}).
    """
    if mats.N > DENSE_LIMIT:
        raise ValueError(f"dense spectrum limited to N <= {DENSE_LIMIT}; gap is fit-only")
    ev = np.linalg.eigvals(mats.A_bwd.toarray())
    order = np.argsort(-ev.real)
    ev = ev[order]
    lead = float(ev[0].real)
    lam_c = lead if lambda_c is None else lambda_c
    second = float(ev[1].real) if len(ev) > 1 else -np.inf
    lam = np.asarray(mats.Lambda) if hasattr(mats, "Lambda") else np.zeros(0)
    floor = -float(lam.min()) if lam.size else -np.inf
    return lead, second, lam_c - max(second, floor)


# ---------------------------------------------------------------- prompt-block route

def _lambda_min(blocks):
    lam = np.asarray(blocks.Lambda)
    return float(lam.min()) if lam.size else None


def build_klambda(blocks, lam):
    """K(lambda) = K_top + M (lambda I + Lambda)^-1 K_bottom."""
    Kt = sp.csr_matrix(blocks.K_circ_top)
    lmin = _lambda_min(blocks)
    if lmin is None:
        return Kt
    if not lam > -lmin:
        raise LambdaDomainError(f"lambda = {lam} must exceed -lambda_(ell+1) = {-lmin}")
    hold = 1.0 / (lam + np.asarray(blocks.Lambda))
    return (Kt + sp.csr_matrix(blocks.M_block) @ sp.diags(hold) @ sp.csr_matrix(blocks.K_circ_bottom)).tocsr()


STALL_WINDOW = 50
STALL_GAP = 1e-9


@dataclass
class RadiusResult:
    r: float
    vector: np.ndarray
    iterations: int
    bounds: tuple


def spectral_radius_r(blocks, lam, tol=1e-13, start=None, max_iter=50000, full=False):
    """Spectral radius of (lambda I - T)^-1 K(lambda) by positive power iteration.

    Stops when the Collatz-Wielandt lower and upper bounds agree to tol, or
    when they stop tightening at a relative gap below STALL_GAP (round-off
    floor, which is reached near the pole at lambda = -lambda_(ell+1)).
    """
    B = build_klambda(blocks, lam)
    T = sp.csc_matrix(blocks.T_block)
    n = T.shape[0]
    try:
        lu = spla.splu(sp.csc_matrix(lam * sp.identity(n) - T))
    except RuntimeError as exc:
        raise ConvergenceError(f"resolvent solve failed at lambda = {lam}: {exc}") from exc
    w = np.ones(n) if start is None else np.maximum(np.asarray(start, dtype=float), 0.0)
    w = w / w.sum()
    hist = []
    lo = hi = None
    for it in range(1, max_iter + 1):
        u = lu.solve(B @ w)
        if np.any(u < -1e-12 * np.max(np.abs(u))):
            raise ConvergenceError(f"resolvent lost positivity at lambda = {lam}; is lambda above s(T)?")
        u = np.maximum(u, 0.0)
        pos = w > 0
        ratio = u[pos] / w[pos]
        lo, hi = float(ratio.min()), float(ratio.max())
        if np.any(~pos) and np.any(u[~pos] > 0):
            hi = np.inf
        s = u.sum()
        if not s > 0:
            return RadiusResult(0.0, w, it, (0.0, 0.0)) if full else 0.0
        w = u / s
        hist.append((lo, hi))
        gap = hi - lo
        stalled = it > STALL_WINDOW and gap >= hist[-STALL_WINDOW - 1][1] - hist[-STALL_WINDOW - 1][0]
        if gap <= tol * hi or (stalled and gap <= STALL_GAP * hi):
            r = 0.5 * (lo + hi)
            return RadiusResult(r, w, it, (lo, hi)) if full else r
    raise ConvergenceError(f"r(lambda) iteration did not converge at lambda = {lam}; last bounds {hist[-3:]}")


def _abscissa_T(blocks):
    """Spectral abscissa of the prompt transport block (dense when small, Gershgorin otherwise)."""
    T = sp.csr_matrix(blocks.T_block)
    if T.shape[0] <= DENSE_LIMIT:
        return float(np.max(np.linalg.eigvals(T.toarray()).real))
    d = T.diagonal()
    off = np.asarray(abs(T).sum(axis=1)).ravel() - np.abs(d)
    return float(np.max(d + off))


def default_floor(blocks):
    """Lower end of the lambda search when there are no delayed species."""
    T = sp.csr_matrix(blocks.T_block)
    floor = -10.0 * float(np.max(np.abs(T.diagonal())))
    s = _abscissa_T(blocks)
    if floor <= s:
        floor = s + 1e-6 * (1.0 + abs(s))
    return floor


def lambda_c_by_root(blocks, tol=1e-11, delta=1e-6, floor=None, max_expand=60, full=False):
    """Root of r(lambda) = 1 by bracket expansion and bisection."""
    lmin = _lambda_min(blocks)
    if lmin is not None:
        lo = -lmin + delta
    else:
        lo = default_floor(blocks) if floor is None else floor
    r_lo = spectral_radius_r(blocks, lo, full=True)
    if not r_lo.r > 1.0:
        raise BracketError(f"r({lo:.6g}) = {r_lo.r:.6g} <= 1: no root above the search floor")
    step = 1.0
    hi = lo + step
    r_hi = spectral_radius_r(blocks, hi, start=r_lo.vector, full=True)
    n = 0
    while r_hi.r >= 1.0:
        n += 1
        if n > max_expand:
            raise BracketError(f"no upper bracket found up to lambda = {hi:.6g} (r = {r_hi.r:.6g})")
        lo, r_lo = hi, r_hi
        step *= 2.0
        hi = lo + step
        r_hi = spectral_radius_r(blocks, hi, start=r_lo.vector, full=True)
    vec = r_lo.vector
    mid, r_mid = lo, r_lo
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        r_mid = spectral_radius_r(blocks, mid, start=vec, full=True)
        vec = r_mid.vector
        if abs(r_mid.r - 1.0) < tol or hi - lo < 1e-15 * max(1.0, abs(mid)):
            break
        if r_mid.r > 1.0:
            lo = mid
        else:
            hi = mid
    return (mid, r_mid) if full else mid


def delayed_from_prompt(blocks, lam, phi_prompt):
    """Isotope components (lambda I + Lambda)^-1 K_bottom phi_prompt."""
    lmin = _lambda_min(blocks)
    if lmin is None:
        return np.zeros(0)
    if not lam > -lmin:
        raise LambdaDomainError(f"lambda = {lam} must exceed -lambda_(ell+1) = {-lmin}")
    return (sp.csr_matrix(blocks.K_circ_bottom) @ phi_prompt) / (lam + np.asarray(blocks.Lambda))


def eigen_by_root(mats, tol=1e-11):
    """Eigenpair from the prompt-block route, phi normalized to unit weighted norm."""
    lam, rr = lambda_c_by_root(mats, tol=tol, full=True)
    phi = np.concatenate([rr.vector, delayed_from_prompt(mats, lam, rr.vector)])
    W = np.asarray(mats.weights)
    phi = phi / _wnorm(W, phi)
    res = _wnorm(W, mats.A_bwd @ phi - lam * phi)
    return Eigensolution(lam, phi, residual=res)


def cosine(W, a, b):
    return float(np.sum(W * a * b)) / (_wnorm(W, a) * _wnorm(W, b))


# ---------------------------------------------------------------- decay and MC rate

@dataclass
class DecayReport:
    t: np.ndarray
    rho: np.ndarray
    slope: float
    epsilon: float
    saturated: bool
    passed: bool


RHO_FLOOR = 1e-13


def asymptotic_decay_check(mats, eig, f, t_grid, epsilon=None, slack=0.1, method="auto"):
    """rho(t) = || exp(-lambda_c t) V_t f - <f, phi~> phi || and its log-slope."""
    W = np.asarray(mats.weights)
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError("t grid must be increasing")
    f = np.asarray(f, dtype=float)
    proj = float(np.sum(W * f * eig.phi_tilde)) * eig.phi
    if method == "auto":
        method = "expm" if mats.N <= DENSE_LIMIT else "rk4"
    cache = {}
    u = f.copy()
    prev = 0.0
    rho = np.empty(len(t_grid))
    for j, t in enumerate(t_grid):
        dt = t - prev
        if dt > 0:
            if method == "expm":
                key = round(dt, 12)
                if key not in cache:
                    cache[key] = scipy.linalg.expm(dt * mats.A_bwd.toarray())
                u = cache[key] @ u
            else:
                u = evolve_acp(mats, u, dt)
        prev = t
        rho[j] = _wnorm(W, math.exp(-eig.lambda_c * t) * u - proj)
    ok = rho > RHO_FLOOR
    saturated = ok.sum() < 2
    if saturated:
        slope = -np.inf
    else:
        slope = float(np.polyfit(t_grid[ok], np.log(rho[ok]), 1)[0])
    passed = saturated or epsilon is None or slope <= -epsilon + slack * abs(epsilon)
    return DecayReport(t_grid, rho, slope, epsilon, bool(saturated), bool(passed))


@dataclass(frozen=True)
class GrowthFit:
    rate: float
    ci95: float
    stderr: float
    n_points: int


def mc_growth_rate(t, mean, stderr, burn_in=0.3):
    """Weighted least-squares slope of log(mean) against t past the burn-in window."""
    t = np.asarray(t, dtype=float)
    mean = np.asarray(mean, dtype=float)
    stderr = np.asarray(stderr, dtype=float)
    keep = t >= t[0] + burn_in * (t[-1] - t[0])
    t, mean, stderr = t[keep], mean[keep], stderr[keep]
    if len(t) < 4:
        raise ValueError("need at least 4 time points past the burn-in window")
    if np.any(mean <= 0):
        raise ValueError("non-positive tally mean in the fit window; the population died out")
    y = np.log(mean)
    sy = stderr / mean
    if np.all(sy == 0):
        wts = np.ones_like(t)
        exact = True
    else:
        wts = 1.0 / np.maximum(sy, 1e-300) ** 2
        exact = False
    tb = np.sum(wts * t) / wts.sum()
    sxx = np.sum(wts * (t - tb) ** 2)
    yb = np.sum(wts * y) / wts.sum()
    slope = float(np.sum(wts * (t - tb) * (y - yb)) / sxx)
    se = 0.0 if exact else float(math.sqrt(1.0 / sxx))
    return GrowthFit(slope, 1.96 * se, se, len(t))
