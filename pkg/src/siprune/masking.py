"""Importance scores -> binary masks under unstructured-rate or N:M patterns."""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from .core import as_matrix, check_finite, hadamard
from .errors import DomainError, PatternError


@dataclass(frozen=True)
class Unstructured:
    rate: float

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise DomainError(f"sparsity rate must be in [0, 1], got {self.rate}")


@dataclass(frozen=True)
class NM:
    n: int
    m: int

    def __post_init__(self):
        if not (0 < self.n < self.m):
            raise DomainError(f"N:M requires 0 < n < m, got {self.n}:{self.m}")


SparsityPattern = Unstructured | NM


def parse_pattern(text: str) -> SparsityPattern:
    """Parse CLI/config pattern syntax: "0.5" (rate) or "2:4" (N:M)."""
    text = text.strip()
    if ":" in text:
        n_str, m_str = text.split(":", 1)
        try:
            return NM(int(n_str), int(m_str))
        except (ValueError, DomainError) as e:
            raise PatternError(f"bad N:M pattern {text!r}") from e
    try:
        return Unstructured(float(text))
    except (ValueError, DomainError) as e:
        raise PatternError(f"bad sparsity pattern {text!r}") from e


def make_mask(scores, pattern: SparsityPattern) -> np.ndarray:
    """Binary mask keeping the highest-scoring entries.

    Unstructured: keeps the top (1-rate) fraction per layer, zeroing exactly
    floor(rate * size) entries. N:M: keeps the top n of every contiguous
    m-sized group along each row. Ties are broken deterministically by lower
    flat row-major index kept first.
    """
    scores = as_matrix(scores, "scores")
    check_finite(scores, "scores")
    rows, cols = scores.shape
    if isinstance(pattern, Unstructured):
        size = rows * cols
        zeros = math.floor(pattern.rate * size)
        keep = size - zeros
        # stable sort on negated scores: ties keep lower flat index first
        order = np.argsort(-scores.ravel(), kind="stable")
        mask = np.zeros(size)
        mask[order[:keep]] = 1.0
        return mask.reshape(rows, cols)
    if cols % pattern.m != 0:
        raise PatternError(
            f"N:M pattern {pattern.n}:{pattern.m} requires m to divide the "
            f"column count, got {cols} columns"
        )
    groups = scores.reshape(rows, cols // pattern.m, pattern.m)
    order = np.argsort(-groups, axis=2, kind="stable")
    mask = np.zeros_like(groups)
    np.put_along_axis(mask, order[:, :, : pattern.n], 1.0, axis=2)
    return mask.reshape(rows, cols)


def apply_mask(w, mask) -> np.ndarray:
    """Hadamard product of weights with a {0,1} mask."""
    return hadamard(w, mask)


def check_mask(mask, pattern: SparsityPattern) -> bool:
    """Exhaustively verify the pattern invariants of a mask."""
    mask = as_matrix(mask, "mask")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        return False
    rows, cols = mask.shape
    if isinstance(pattern, Unstructured):
        zeros = int(np.sum(mask == 0.0))
        return zeros == math.floor(pattern.rate * rows * cols)
    if cols % pattern.m != 0:
        return False
    groups = mask.reshape(rows, cols // pattern.m, pattern.m)
    return bool(np.all(groups.sum(axis=2) == pattern.n))
