"""Per-weight importance scores and the constant-time score refresh.

Three metrics are exposed through the CLI: "magnitude" (|W|), "wanda"
(|W| scaled per column by the root of the input second moment), and
"wanda-fast" (same score, but the input second moments are refreshed in
O(d_in) from cached diagonals when a per-channel scaling is absorbed,
instead of being recomputed from activations).
"""

from __future__ import annotations

import time

import numpy as np

from . import core
from .core import as_matrix, as_vector
from .errors import DomainError, ShapeError

METRICS = ("magnitude", "wanda", "wanda-fast")


def score_magnitude(w) -> np.ndarray:
    """Elementwise |W|."""
    return np.abs(as_matrix(w, "w"))


def hessian_diag(calib) -> np.ndarray:
    """Diagonal of the empirical input covariance: d[j] = mean_k x[j,k]^2.

    ``calib`` holds calibration inputs as columns (d_in x n_samples).
    """
    x = as_matrix(calib, "calib")
    return np.mean(x * x, axis=1)


def score_activation(w, d) -> np.ndarray:
    """Activation-aware score: |w[i,j]| * sqrt(d[j])."""
    w = as_matrix(w, "w")
    d = as_vector(d, "d")
    if d.shape[0] != w.shape[1]:
        raise ShapeError(
            f"diagonal length {d.shape[0]} does not match d_in {w.shape[1]}"
        )
    if np.any(d < 0):
        raise DomainError("hessian diagonal entries must be >= 0")
    return np.abs(w) * np.sqrt(d)[None, :]


def fast_refresh(d, s) -> np.ndarray:
    """Refresh cached diagonals under an absorbed per-channel scaling.

    d'[j] = s[j]^2 * d[j]; O(d_in), no forward pass. Equals the diagonal
    recomputed from the scaled inputs Diag(s) X exactly.
    """
    d = as_vector(d, "d")
    s = as_vector(s, "s")
    if s.shape != d.shape:
        raise ShapeError(f"scale length {s.shape[0]} != diagonal length {d.shape[0]}")
    if np.any(s <= 0):
        raise DomainError("scales must be strictly positive")
    return s * s * d


def benchmark_refresh(d_in: int, n_samples: int, iters: int, seed: int = 0) -> dict:
    """Wall-clock comparison of classical activation recompute vs fast refresh.

    The classical path folds the scales into the producing layer's weights,
    recomputes its output activations for the whole calibration batch and
    rebuilds the diagonal from them. The fast path rescales cached diagonals
    in O(d_in). Also reports the number of matrix-matrix products each path
    performed, which must be zero for the fast path.
    """
    if d_in < 1 or n_samples < 1 or iters < 1:
        raise DomainError("d_in, n_samples and iters must be >= 1")
    rng = core.Rng(seed)
    w_prev = rng.normal((d_in, d_in)) / np.sqrt(d_in)
    a_prev = rng.normal((d_in, n_samples))
    scales = np.exp(0.1 * rng.normal((iters, d_in)))
    d_base = hessian_diag(core.matmul(w_prev, a_prev))

    core.reset_matmul_count()
    t0 = time.perf_counter()
    for i in range(iters):
        _ = hessian_diag(core.matmul(scales[i][:, None] * w_prev, a_prev))
    classical_s = (time.perf_counter() - t0) / iters
    classical_matmuls = core.matmul_call_count()

    core.reset_matmul_count()
    t0 = time.perf_counter()
    for i in range(iters):
        _ = fast_refresh(d_base, scales[i])
    fast_s = (time.perf_counter() - t0) / iters
    fast_matmuls = core.matmul_call_count()

    return {
        "d_in": d_in,
        "n_samples": n_samples,
        "iters": iters,
        "classical_s": classical_s,
        "fast_s": fast_s,
        "speedup": classical_s / fast_s,
        "classical_matmuls": classical_matmuls,
        "fast_matmuls": fast_matmuls,
    }
