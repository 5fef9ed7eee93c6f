"""Counter-based SplitMix64 random streams.

Every random draw in the package comes from a :class:`Stream` whose key is
derived from a master seed plus an explicit integer path, e.g.
``derive(seed, parcel_i, parcel_j, t, PURPOSE)``.  Draw ``k`` of a stream is
``mix64(key + (k + 1) * GAMMA)``, so values are independent of call order,
vectorize cleanly in numpy, and are reproducible in any language with 64-bit
unsigned arithmetic.
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= np.uint64(_M1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_M2)
    z ^= z >> np.uint64(31)
    return z


def derive(seed: int, *path: int) -> int:
    """Derive a child seed from ``seed`` and a path of non-negative ints."""
    h = mix64((seed & MASK64) ^ 0x5EED5EED5EED5EED)
    for p in path:
        if p < 0:
            raise ValueError(f"stream path components must be >= 0, got {p}")
        h = mix64(h + ((p + 1) * GAMMA & MASK64))
    return h


class Stream:
    """Sequential view over a counter-based stream."""

    def __init__(self, key: int):
        self.key = key & MASK64
        self.counter = 0

    @classmethod
    def from_path(cls, seed: int, *path: int) -> "Stream":
        return cls(derive(seed, *path))

    def bits(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + idx * np.uint64(GAMMA)
        return _mix64_array(z)

    def uniform(self, n: int | tuple = 1, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = (n,) if isinstance(n, int) else tuple(n)
        size = int(np.prod(shape))
        u = (self.bits(size) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (low + (high - low) * u).reshape(shape)

    def random(self) -> float:
        return float(self.uniform(1)[0])

    def integers(self, low: int, high: int, n: int = 1) -> np.ndarray:
        """Uniform ints in ``[low, high)`` by floor-scaling a 53-bit float."""
        if high <= low:
            raise ValueError("empty integer range")
        u = self.uniform(n)
        return np.minimum(low + np.floor(u * (high - low)).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        # Fisher-Yates driven by the stream.
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(u[k] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
