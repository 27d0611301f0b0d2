"""Dense float64 helpers, the in-repo PRNG, and pivoted-elimination rank.

Matrices are plain 2-D ``numpy.float64`` arrays in C (row-major) order.
"""

from __future__ import annotations

import math

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _splitmix64(counters: np.ndarray, seed: int) -> np.ndarray:
    z = np.uint64(seed & _MASK64) + counters * _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class SeededRng:
    """SplitMix64 stream.

    Output ``i`` (1-based) of a stream seeded with ``s`` is::

        z = (s + i * 0x9E3779B97F4A7C15) mod 2**64
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        z =  z ^ (z >> 31)

    Being counter based, blocks of outputs are produced with vectorised numpy
    arithmetic, so a 4096x4096 matrix costs no Python-level loop.
    """

    def __init__(self, seed: int) -> None:
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _splitmix64(idx, self.seed)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) from the top 53 bits of each output."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def gaussian(self, n: int) -> np.ndarray:
        # Box-Muller, both branches used: pair j yields outputs 2j and 2j+1.
        half = (n + 1) // 2
        u = self.uniform(2 * half)
        r = np.sqrt(-2.0 * np.log(1.0 - u[0::2]))
        theta = 2.0 * math.pi * u[1::2]
        out = np.empty(2 * half)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def integers(self, high: int, n: int) -> np.ndarray:
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.next_u64(n), kind="stable")

    def choice(self, population: int, k: int) -> np.ndarray:
        """Sorted ``k`` distinct indices drawn uniformly from ``range(population)``."""
        if not 0 <= k <= population:
            raise ValueError(f"cannot draw {k} of {population} without replacement")
        if k == 0:
            return np.empty(0, dtype=np.int64)
        keys = self.next_u64(population)
        if k == population:
            return np.arange(population, dtype=np.int64)
        picked = np.argpartition(keys, k - 1)[:k]
        return np.sort(picked).astype(np.int64)

    def spawn(self, tag: int) -> SeededRng:
        """Independent child stream; does not advance this one."""
        mixed = _splitmix64(np.array([tag + 1], dtype=np.uint64), self.seed ^ 0x5DEECE66D)
        return SeededRng(int(mixed[0]))


def as_matrix(a) -> np.ndarray:
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def add_scaled(w: np.ndarray, delta: np.ndarray, alpha: float) -> np.ndarray:
    """``w + alpha * delta``; ``alpha == 0`` returns an exact copy of ``w``."""
    w, delta = as_matrix(w), as_matrix(delta)
    if w.shape != delta.shape:
        raise ShapeError(f"shape mismatch: {w.shape} vs {delta.shape}")
    if alpha == 0:
        # w + 0*d would turn -0.0 into +0.0
        return w.copy()
    return w + alpha * delta


def numerical_rank(a: np.ndarray, tol: float = 1e-9) -> int:
    """Count of elimination pivots above ``tol`` times the largest pivot.

    Gaussian elimination with full pivoting; the first pivot is the largest
    absolute entry, so the threshold is relative to the matrix scale.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ShapeError(f"numerical_rank needs a non-empty matrix, got shape {a.shape}")
    n, m = a.shape
    rank = 0
    threshold = None
    for k in range(min(n, m)):
        sub = np.abs(a[k:, k:])
        flat = int(np.argmax(sub))
        i, j = divmod(flat, sub.shape[1])
        pivot = sub[i, j]
        if threshold is None:
            if pivot == 0:
                return 0
            threshold = tol * pivot
        if pivot <= threshold:
            break
        if i:
            a[[k, k + i]] = a[[k + i, k]]
        if j:
            a[:, [k, k + j]] = a[:, [k + j, k]]
        factors = a[k + 1 :, k] / a[k, k]
        a[k + 1 :, k:] -= np.outer(factors, a[k, k:])
        rank += 1
    return rank


def rand_matrix(rng: SeededRng, rows: int, cols: int, dist: str = "gaussian", std: float = 1.0) -> np.ndarray:
    """Seeded matrix: ``uniform`` in [0,1), ``gaussian`` N(0, std^2), or ``kaiming`` N(0, 2/cols)."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"rows and cols must be >= 1, got {rows}x{cols}")
    n = rows * cols
    if dist == "uniform":
        data = rng.uniform(n)
    elif dist == "gaussian":
        data = rng.gaussian(n) * std
    elif dist == "kaiming":
        data = rng.gaussian(n) * math.sqrt(2.0 / cols)
    else:
        raise ValueError(f"unknown distribution {dist!r}")
    return data.reshape(rows, cols)


def orthogonal(rng: SeededRng, n: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix via sign-corrected QR."""
    q, r = np.linalg.qr(rand_matrix(rng, n, n))
    return q * np.sign(np.diag(r))
