"""Dense linear algebra, deterministic randomness, and selection primitives.

Everything here is pure and deterministic: identical inputs give
bit-identical outputs on every platform. Matrices are plain 2-D float64
numpy arrays in row-major order.
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeError, UsageError

# A Matrix is a 2-D float64 ndarray; helpers below validate shape only
# where a contract can actually be violated by the caller.
Matrix = np.ndarray

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class SeededRng:
    """Counter-based pseudo-random generator (SplitMix64).

    Update rule, all arithmetic mod 2**64:

        state <- state + 0x9E3779B97F4A7C15
        z <- state
        z <- (z XOR (z >> 30)) * 0xBF58476D1CE4E5B9
        z <- (z XOR (z >> 27)) * 0x94D049BB133111EB
        output <- z XOR (z >> 31)

    ``uniform`` maps the top 53 bits of the output to [0, 1). The stream
    depends only on the seed, never on platform or numpy version, so
    serialized weights and golden files are reproducible everywhere.
    """

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform_block(self, n: int) -> np.ndarray:
        """Vectorized batch of ``uniform`` draws, identical to n scalar calls."""
        counters = np.arange(1, n + 1, dtype=np.uint64)
        states = (np.uint64(self._state) + counters * np.uint64(_GAMMA)) & np.uint64(_MASK64)
        self._state = int(states[-1]) if n else self._state
        z = states
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
        return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n), rejection-sampled to avoid modulo bias."""
        if n <= 0:
            raise UsageError("randint needs n >= 1")
        limit = _MASK64 + 1 - ((_MASK64 + 1) % n)
        while True:
            v = self.next_u64()
            if v < limit:
                return v % n

    def sample(self, n: int, k: int) -> list[int]:
        """k distinct integers from [0, n), in draw order (partial Fisher-Yates)."""
        if k > n:
            raise UsageError(f"cannot sample {k} distinct values from range {n}")
        pool = list(range(n))
        out = []
        for i in range(k):
            j = i + self.randint(n - i)
            pool[i], pool[j] = pool[j], pool[i]
            out.append(pool[i])
        return out


def stable_floor(x: float) -> int:
    """Floor with a hair of upward bias.

    Products like (1 - 0.9) * 40 land at 3.9999999999999996 in binary;
    budget arithmetic must read them as the exact 4 they stand for.
    """
    return int(np.floor(x + 1e-9))


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product with an explicit inner-dimension check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(m: Matrix, scale: float) -> Matrix:
    """Row-wise softmax of ``m * scale`` with max-subtraction for stability.

    Entries equal to -inf act as masks and map to exactly 0.0. A fully
    masked row comes back as all zeros rather than NaN.
    """
    if scale <= 0:
        raise UsageError(f"softmax scale must be positive, got {scale}")
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D matrix, got {m.ndim}-D")
    with np.errstate(invalid="ignore"):
        z = m * scale
        mx = np.max(z, axis=1, keepdims=True)
        mx = np.where(np.isfinite(mx), mx, 0.0)  # fully masked row -> no shift
        e = np.exp(z - mx)
    e[~np.isfinite(z)] = 0.0
    denom = e.sum(axis=1, keepdims=True)
    denom[denom == 0.0] = 1.0
    return e / denom


def argsort_desc(v: np.ndarray) -> np.ndarray:
    """Indices sorting ``v`` into non-increasing order.

    Stable: equal values keep their original relative order, so ties
    resolve to the lower index first. Empty input gives an empty
    permutation.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"argsort_desc expects a vector, got {v.ndim}-D")
    if v.size and not np.all(np.isfinite(v)):
        raise UsageError("argsort_desc requires finite entries")
    return np.argsort(-v, kind="stable")
