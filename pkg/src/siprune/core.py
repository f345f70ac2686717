"""Dense float64 matrix/vector primitives used by every other module.

Matrices are 2-D ``numpy.ndarray`` of dtype float64 (row-major), vectors are
1-D. All public operations validate shapes and finiteness and raise
:class:`~siprune.errors.ShapeError` / :class:`~siprune.errors.DomainError`
instead of letting numpy broadcast silently.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, ShapeError

# Matrix-matrix product counter; the refresh benchmark uses it to assert that
# the fast path performs zero matmuls.
_MATMUL_CALLS = 0


def matmul_call_count() -> int:
    return _MATMUL_CALLS


def reset_matmul_count() -> None:
    global _MATMUL_CALLS
    _MATMUL_CALLS = 0


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={a.ndim}")
    if a.size == 0:
        raise DomainError(f"{name} must be non-empty")
    return a


def as_vector(v, name: str = "vector") -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got ndim={v.ndim}")
    if v.size == 0:
        raise DomainError(f"{name} must be non-empty")
    return v


def check_finite(a: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise DomainError(f"{name} contains non-finite entries")
    return a


class Rng:
    """Seeded deterministic generator (numpy PCG64).

    Identical seeds produce identical streams across runs and platforms.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)


def matmul(a, b) -> np.ndarray:
    """Standard matrix product with explicit shape diagnostics."""
    global _MATMUL_CALLS
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    _MATMUL_CALLS += 1
    return a @ b


def hadamard(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    return a * b


def entrywise_p_norm(w, p: float) -> float:
    """(sum_ij |w_ij|^p)^(1/p) for p >= 1."""
    w = as_matrix(w, "w")
    if p < 1:
        raise DomainError(f"p must be >= 1, got {p}")
    return float(np.sum(np.abs(w) ** p) ** (1.0 / p))


def operator_norm(w) -> float:
    """Largest singular value (spectral norm)."""
    w = as_matrix(w, "w")
    return float(np.linalg.norm(w, 2))


def col_l2_norms(x) -> np.ndarray:
    """Per-column Euclidean norms."""
    x = as_matrix(x, "x")
    return np.sqrt(np.sum(x * x, axis=0))


def row_stats(y):
    """Per-row (median, mean) over samples in columns.

    Median of an even sample count is the average of the two central values
    (numpy convention).
    """
    y = as_matrix(y, "y")
    return np.median(y, axis=1), np.mean(y, axis=1)
