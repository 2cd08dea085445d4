"""Dense matrix helpers and the deterministic RNG used everywhere.

Matrices are plain 2-D float64 numpy arrays (row-major). The helpers here
validate shapes and finiteness so the rest of the package can assume both.

Randomness contract (``RNG_ALGORITHM``): every random draw in this package
flows through :class:`Rng`, a splitmix64 generator — a 64-bit Weyl counter
whose output is a fixed bit-mixing permutation of the counter. Normal
variates use the Box-Muller transform with deterministic pairing (the
second variate of each pair is cached and returned by the next call).
Identical seeds therefore reproduce identical streams on any platform,
independent of numpy's RNG internals.
"""

from __future__ import annotations

import math
from collections.abc import MutableSequence, Sequence

import numpy as np

from .errors import NumericError, ShapeError

RNG_ALGORITHM = "splitmix64/box-muller-v1"

_MASK64 = (1 << 64) - 1
_WEYL = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    """splitmix64 output permutation of a 64-bit word."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(*parts: int | str) -> int:
    """Fold integers and strings into one 64-bit seed.

    Used to give every subsystem (client, round, dataset, ...) its own
    independent stream from a single master seed. Strings are folded
    byte-wise so textual labels participate in the mix.
    """
    h = _WEYL
    for part in parts:
        if isinstance(part, str):
            for b in part.encode("utf-8"):
                h = _mix64(h ^ b)
        else:
            h = _mix64(h ^ (int(part) & _MASK64))
    return h


class Rng:
    """Deterministic splitmix64 stream with Box-Muller normals.

    Single-owner: instances are not safe to share across threads.
    """

    def __init__(self, seed: int):
        self._state = int(seed) & _MASK64
        self._spare_normal: float | None = None

    def next_uint64(self) -> int:
        self._state = (self._state + _WEYL) & _MASK64
        return _mix64(self._state)

    def uniform(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_uint64() >> 11) * 2.0**-53

    def normal(self) -> float:
        """Standard normal variate (Box-Muller, deterministic pairing)."""
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
            return z
        # u1 in (0, 1] keeps log(u1) finite.
        u1 = ((self.next_uint64() >> 11) + 1) * 2.0**-53
        u2 = self.uniform()
        radius = math.sqrt(-2.0 * math.log(u1))
        self._spare_normal = radius * math.sin(2.0 * math.pi * u2)
        return radius * math.cos(2.0 * math.pi * u2)

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise ValueError(f"randbelow needs a positive bound, got {n}")
        limit = (_MASK64 + 1) - ((_MASK64 + 1) % n)
        while True:
            x = self.next_uint64()
            if x < limit:
                return x % n

    def shuffle(self, items: MutableSequence) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample_indices(self, population: int, k: int) -> list[int]:
        """k distinct indices from range(population), uniformly without replacement."""
        if not 0 <= k <= population:
            raise ValueError(f"cannot sample {k} from population of {population}")
        ids = list(range(population))
        for i in range(k):
            j = i + self.randbelow(population - i)
            ids[i], ids[j] = ids[j], ids[i]
        return ids[:k]


def _as_matrix(a: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def _check_finite(arr: np.ndarray, context: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{context} produced non-finite values")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product a @ b with shape validation."""
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul dimension mismatch: {a.shape[0]}x{a.shape[1]} times "
            f"{b.shape[0]}x{b.shape[1]}"
        )
    return _check_finite(a @ b, "matmul")


def transpose(a: np.ndarray) -> np.ndarray:
    a = _as_matrix(a, "a")
    return np.ascontiguousarray(a.T)


def axpy(alpha: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """alpha*x + y for same-shape matrices."""
    x = _as_matrix(x, "x")
    y = _as_matrix(y, "y")
    if x.shape != y.shape:
        raise ShapeError(f"axpy shape mismatch: {x.shape} vs {y.shape}")
    return _check_finite(alpha * x + y, "axpy")


def random_normal(rng: Rng, rows: int, cols: int) -> np.ndarray:
    """rows x cols matrix of i.i.d. standard normals, filled row-major."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"random_normal needs positive dims, got {rows}x{cols}")
    out = np.empty((rows, cols), dtype=np.float64)
    flat = out.reshape(-1)
    for i in range(flat.size):
        flat[i] = rng.normal()
    return out


def random_unit_vector(rng: Rng, dim: int) -> np.ndarray:
    """Unit-norm direction drawn from an isotropic normal."""
    v = np.array([rng.normal() for _ in range(dim)], dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:  # probability ~0, but keep the contract total
        v[0] = 1.0
        norm = 1.0
    return v / norm


def linspace(start: float, end: float, n: int) -> np.ndarray:
    """n evenly spaced values from start to end inclusive; n=1 gives [start]."""
    if n < 1:
        raise ValueError(f"linspace needs n >= 1, got {n}")
    if n == 1:
        return np.array([start], dtype=np.float64)
    step = (end - start) / (n - 1)
    out = np.array([start + i * step for i in range(n)], dtype=np.float64)
    out[-1] = end
    return out


def largest_remainder(weights: Sequence[float], total: int) -> list[int]:
    """Integer allocation of ``total`` proportional to ``weights``.

    Floors the exact quotas, then hands out the remaining units by
    descending fractional remainder (ties broken by position). The result
    always sums to ``total`` exactly.
    """
    if total < 0:
        raise ValueError(f"total must be nonnegative, got {total}")
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0 or np.any(w < 0):
        raise ValueError("weights must be nonempty and nonnegative")
    s = float(w.sum())
    if s <= 0:
        raise ValueError("weights must have a positive sum")
    quotas = w / s * total
    counts = np.floor(quotas).astype(int)
    remainders = quotas - counts
    short = total - int(counts.sum())
    order = sorted(range(w.size), key=lambda i: (-remainders[i], i))
    for i in order[:short]:
        counts[i] += 1
    return counts.tolist()
