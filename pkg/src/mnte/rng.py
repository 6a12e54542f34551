"""Counter-based random streams.

Every Monte Carlo path owns a stream keyed by (seed, path index). Draw n of a
stream is a pure function of (key, n), so results never depend on how paths are
partitioned across worker threads.
"""
import numpy as np
from numba import njit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0


@njit(cache=True, nogil=True)
def mix64(z):
    """SplitMix64 finalizer."""
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, nogil=True)
def stream_key(seed, index):
    k = mix64(np.uint64(seed) + GOLDEN)
    return mix64(k ^ (np.uint64(index) * GOLDEN + _M2))


@njit(cache=True, nogil=True)
def draw_u01(key, ctr):
    """Uniform on the open interval (0, 1); advances ctr[0]."""
    z = mix64(key + (ctr[0] + np.uint64(1)) * GOLDEN)
    ctr[0] += np.uint64(1)
    return (np.float64(z >> _S11) + 0.5) * _INV53


@njit(cache=True, nogil=True)
def draw_exp1(key, ctr):
    return -np.log(draw_u01(key, ctr))


@njit(cache=True, nogil=True)
def draw_index(cdf, u):
    """First index whose cumulative weight exceeds u * cdf[-1]."""
    target = u * cdf[cdf.shape[0] - 1]
    lo = 0
    hi = cdf.shape[0] - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if cdf[mid] > target:
            hi = mid
        else:
            lo = mid + 1
    return lo


class CounterRNG:
    """Python handle on one counter-based stream."""

    def __init__(self, seed, stream=0):
        self.key = np.uint64(stream_key(np.uint64(seed), np.uint64(stream)))
        self.ctr = np.zeros(1, dtype=np.uint64)

    def uniform(self):
        return draw_u01(self.key, self.ctr)

    def exponential(self):
        """Unit-rate exponential variate."""
        return draw_exp1(self.key, self.ctr)

    def uniforms(self, n):
        return np.array([draw_u01(self.key, self.ctr) for _ in range(n)])
