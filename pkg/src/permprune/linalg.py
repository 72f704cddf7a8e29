"""Dense matrix helpers and hard-permutation primitives.

Matrices are 2-D float64 numpy arrays. A hard permutation is an integer
index vector ``perm`` with gather semantics::

    perm[j] = source index that lands in destination position j

so ``apply_rows(perm, m)`` equals ``perm_to_matrix(perm) @ m`` (row j of the
result is row ``perm[j]`` of the input) and ``apply_cols(perm, m)`` equals
``m @ perm_to_matrix(perm).T`` (column j of the result is column ``perm[j]``).
With ``m = W.T`` the row form is the input-channel permutation ``P W^T``.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("matmul produced non-finite values")
    return out


def check_perm(perm, n: int | None = None) -> np.ndarray:
    """Validate ``perm`` as a bijection on ``{0..N-1}`` and return it as int64."""
    p = np.asarray(perm)
    if p.ndim != 1:
        raise ShapeError(f"permutation must be 1-D, got shape {p.shape}")
    if p.size and not np.issubdtype(p.dtype, np.integer):
        if not np.all(p == np.round(p)):
            raise ValueError("permutation entries must be integers")
    p = p.astype(np.int64)
    if n is not None and p.size != n:
        raise ShapeError(f"permutation has length {p.size}, expected {n}")
    seen = np.zeros(p.size, dtype=bool)
    if p.size and (p.min() < 0 or p.max() >= p.size):
        raise ValueError(f"permutation entries out of range: {p.tolist()}")
    seen[p] = True
    if not seen.all():
        raise ValueError(f"not a bijection: {p.tolist()}")
    return p


def identity_perm(n: int) -> np.ndarray:
    return np.arange(n, dtype=np.int64)


def is_identity(perm) -> bool:
    p = np.asarray(perm)
    return bool(np.array_equal(p, np.arange(p.size)))


def perm_to_matrix(perm) -> np.ndarray:
    p = check_perm(perm)
    n = p.size
    out = np.zeros((n, n))
    out[np.arange(n), p] = 1.0
    return out


def perm_invert(perm) -> np.ndarray:
    p = check_perm(perm)
    inv = np.empty_like(p)
    inv[p] = np.arange(p.size)
    return inv


def perm_compose(first, second) -> np.ndarray:
    """Permutation equivalent to gathering by ``first`` and then by ``second``."""
    a = check_perm(first)
    b = check_perm(second, a.size)
    return a[b]


def apply_rows(perm, m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    p = check_perm(perm)
    if m.shape[0] != p.size:
        raise ShapeError(f"permutation of length {p.size} cannot gather rows of {m.shape}")
    return m[p]


def apply_cols(perm, m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    p = check_perm(perm)
    if m.ndim != 2 or m.shape[1] != p.size:
        raise ShapeError(f"permutation of length {p.size} cannot gather columns of {m.shape}")
    return m[:, p]
