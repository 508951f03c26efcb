"""Deterministic numeric kernels shared by every other module.

Conventions: a "matrix" is a C-contiguous float32 ndarray of shape (rows, cols),
a "vector" is a float32 ndarray of shape (dim,). Storage is float32 throughout;
accumulations run in float64 so results are stable to well below test tolerances.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, ShapeError

DTYPE = np.float32


def as_matrix(a, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Validate and return `a` as a float32 (rows, cols) matrix."""
    m = np.ascontiguousarray(a, dtype=DTYPE)
    if m.ndim != 2:
        raise ShapeError(f"expected 2-d matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ShapeError(f"expected {cols} cols, got {m.shape[1]}")
    if not np.isfinite(m).all():
        raise DomainError("matrix entries must be finite")
    return m


def as_vector(a, dim: int | None = None) -> np.ndarray:
    """Validate and return `a` as a float32 (dim,) vector."""
    v = np.ascontiguousarray(a, dtype=DTYPE)
    if v.ndim != 1:
        raise ShapeError(f"expected 1-d vector, got ndim={v.ndim}")
    if dim is not None and v.shape[0] != dim:
        raise ShapeError(f"expected dim {dim}, got {v.shape[0]}")
    if not np.isfinite(v).all():
        raise DomainError("vector entries must be finite")
    return v


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Matrix-vector product, float64 accumulation, float32 result."""
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec shapes incompatible: {m.shape} x {v.shape}")
    out = m.astype(np.float64, copy=False) @ v.astype(np.float64, copy=False)
    return out.astype(DTYPE)


def softmax(scores: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over a 1-d score vector.

    Subtracts the max before exponentiating, accumulates in float64. Preserves
    argmax and is invariant to a constant shift of the input.
    """
    s = np.asarray(scores)
    if s.size == 0:
        raise DomainError("softmax of an empty vector is undefined")
    if not np.isfinite(s).all():
        raise DomainError("softmax input must be finite")
    x = s.astype(np.float64, copy=False)
    x = x - x.max()
    e = np.exp(x)
    return (e / e.sum()).astype(DTYPE)


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical seed gives an identical stream everywhere."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def child_rng(seed: int, *tags: int) -> np.random.Generator:
    """Derive an independent, reproducible substream keyed by integer tags."""
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(tags)))
    )
