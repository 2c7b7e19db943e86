"""Deterministic tensor reductions.

Accumulation order is pinned everywhere results must be reproducible across
code paths: `matmul` and the reduce helpers fold along the shared axis in a
fixed left-to-right order, so the same operands give bit-identical results no
matter which caller runs them.  `matmul_fast` delegates to the BLAS kernel
behind numpy for hot inner loops; it is allowed to bracket sums differently,
so it only has to agree with the fold version to roundoff, and callers that
need cross-path bit equality must stay on the fold route.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation, NumericalError


def _check_2d(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ContractViolation(
            f"matmul expects 2-d operands, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(
            f"inner dimensions differ: {a.shape} x {b.shape}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed left-to-right fold over the shared axis.

    out[i, j] accumulates a[i, 0]*b[0, j], then a[i, 1]*b[1, j], and so on,
    which makes the result bit-identical to a scalar triple loop in the same
    order.  Cost is O(k) full-matrix updates; use matmul_fast when only
    roundoff-level agreement is needed.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_2d(a, b)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[1]):
        out += a[:, i:i + 1] * b[i:i + 1, :]
    return out


def matmul_fast(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """BLAS matrix product; deterministic per machine but not fold-ordered."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_2d(a, b)
    return a @ b


def reduce_sum(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Sum along one axis as a left-to-right fold over that axis's slices."""
    x = np.asarray(x)
    if x.shape[axis] == 0:
        raise ContractViolation("reduce over an empty axis is undefined")
    moved = np.moveaxis(x, axis, 0)
    acc = moved[0].astype(np.result_type(x, np.float64), copy=True)
    for i in range(1, moved.shape[0]):
        acc += moved[i]
    return acc


def reduce_mean(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Mean along one axis: the reduce_sum fold divided by the slice count."""
    x = np.asarray(x)
    return reduce_sum(x, axis) / x.shape[axis]


def fold_sum(parts) -> np.ndarray:
    """Left-to-right sum of a sequence of equally shaped arrays."""
    parts = list(parts)
    if not parts:
        raise ContractViolation("fold_sum over an empty sequence is undefined")
    acc = np.array(parts[0], dtype=np.result_type(parts[0], np.float64), copy=True)
    for p in parts[1:]:
        acc += p
    return acc


def fold_mean(parts) -> np.ndarray:
    parts = list(parts)
    return fold_sum(parts) / len(parts)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    """Raise NumericalError if x contains NaN or infinity; returns x."""
    x = np.asarray(x)
    bad = ~np.isfinite(x)
    if bad.any():
        raise NumericalError(
            f"{what} contains {int(bad.sum())} non-finite entries "
            f"out of {x.size}")
    return x
