"""Numeric kernel: cosine geometry on float64 vectors and a seedable RNG.

Feature vectors are plain 1-D ``float64`` numpy arrays and linear maps are
2-D ``float64`` arrays (row-major).  The helpers here validate those shapes
and reject non-finite or zero-norm input instead of quietly returning a
convention value.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DegenerateInputError",
    "RngState",
    "as_vector",
    "as_matrix",
    "cosine_similarity",
    "cosine_distance",
    "pairwise_cosine_distance",
    "l2_normalize",
    "matvec",
    "sample_gaussian",
]

_MASK64 = (1 << 64) - 1
# SplitMix64 constants (Steele, Lea & Flood 2014).
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class DegenerateInputError(ValueError):
    """Raised for zero-norm vectors and other inputs with no defined answer."""


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _norm(v: np.ndarray, name: str) -> float:
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise DegenerateInputError(f"{name} has zero norm")
    return n


def cosine_similarity(u, v) -> float:
    """Cosine of the angle between ``u`` and ``v``, clamped to [-1, 1]."""
    u = as_vector(u, "u")
    v = as_vector(v, "v")
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}")
    c = float(np.dot(u, v)) / (_norm(u, "u") * _norm(v, "v"))
    return min(1.0, max(-1.0, c))


def cosine_distance(u, v) -> float:
    """``1 - cosine_similarity(u, v)``; always in [0, 2]."""
    return 1.0 - cosine_similarity(u, v)


def pairwise_cosine_distance(a, b) -> np.ndarray:
    """Cosine distance between every row of ``a`` and every row of ``b``."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise DegenerateInputError("zero-norm row in pairwise distance input")
    sim = (a @ b.T) / np.outer(na, nb)
    return 1.0 - np.clip(sim, -1.0, 1.0)


def l2_normalize(v) -> np.ndarray:
    v = as_vector(v)
    return v / _norm(v, "vector")


def matvec(m, v) -> np.ndarray:
    m = as_matrix(m, "map")
    v = as_vector(v)
    if m.shape[1] != v.shape[0]:
        raise ValueError(f"map expects dim {m.shape[1]}, got {v.shape[0]}")
    return m @ v


class RngState:
    """Counter-based SplitMix64 stream.

    The ``i``-th output (1-based) is ``mix(seed + i * GAMMA mod 2**64)``, so a
    block of draws is a pure function of ``(seed, counter)`` and can be computed
    vectorised.  ``counter`` is the only mutable state.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, counter={self.counter})"

    def spawn(self, stream: int) -> "RngState":
        """Independent child stream, derived from the parent's seed only."""
        child_seed = _mix_scalar((self.seed + (stream + 1) * _MIX2) & _MASK64)
        return RngState(child_seed)

    def next_uint64(self, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError("n must be non-negative")
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * np.uint64(_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        return z

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) built from the top 53 bits of each draw."""
        return (self.next_uint64(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def standard_normal(self, n: int) -> np.ndarray:
        """Box-Muller over consecutive uniform pairs; the sine half fills odd slots."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        radius = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        theta = 2.0 * np.pi * u[1::2]
        out = np.empty(2 * pairs)
        out[0::2] = radius * np.cos(theta)
        out[1::2] = radius * np.sin(theta)
        return out[:n]


def _mix_scalar(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def sample_gaussian(rng: RngState, dim: int, sigma: float) -> np.ndarray:
    """``dim`` i.i.d. draws from N(0, sigma**2); advances ``rng``."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if not sigma >= 0:
        raise ValueError("sigma must be >= 0")
    return sigma * rng.standard_normal(dim)
