"""Dense linear-algebra kernels used by the conditioners and the oracle.

Matrices are plain 2-D numpy arrays. Products go through BLAS, symmetric
positive-definite factorizations through LAPACK ``potrf``.

Vectorization convention: ``vec`` is row-major (C order) flattening, so that

    kron(A, B) @ vec(M) == vec(A @ M @ B.T)

For the symmetric Kronecker factors used here this is exactly
``vec(A @ M @ B)``, which makes the identity

    (A^-1 kron B^-1) vec(g^T X) = vec(A^-1 g^T X B^-1)

literal when ``g^T X`` is stored as a ``d_out x d_in`` matrix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, get_lapack_funcs

DEFAULT_JITTER = 1e-8
JITTER_GROWTH = 10.0
MAX_JITTER_RETRIES = 3
MAX_KRON_ENTRIES = 1 << 26


class ContractError(ValueError):
    """Operands violate a shape or value precondition."""


class SingularMatrixError(np.linalg.LinAlgError):
    """Cholesky factorization failed even after jitter escalation."""

    def __init__(self, pivot: int, jitter: float, dim: int):
        self.pivot = pivot
        self.jitter = jitter
        self.dim = dim
        super().__init__(
            f"matrix of dim {dim} is not positive definite: pivot {pivot} failed "
            f"with jitter up to {jitter:g}"
        )


class SizeError(ValueError):
    """Requested result would exceed the configured size limit."""


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise ContractError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def vec(m: np.ndarray) -> np.ndarray:
    """Row-major vectorization (see module docstring)."""
    return np.ascontiguousarray(m).reshape(-1)


def unvec(v: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    return np.asarray(v).reshape(shape)


@dataclass(frozen=True)
class SpdFactor:
    """Lower Cholesky factor of ``sym(a) + jitter * I``."""

    lower: np.ndarray
    jitter: float

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def reconstruct(self) -> np.ndarray:
        return self.lower @ self.lower.T


def spd_factorize(a, jitter: float = 0.0) -> SpdFactor:
    """Cholesky-factor the symmetrized matrix, escalating jitter on failure.

    The first attempt uses ``jitter`` as given. Each of up to
    ``MAX_JITTER_RETRIES`` retries multiplies it by ``JITTER_GROWTH``
    (starting from ``DEFAULT_JITTER`` when ``jitter`` is zero).
    """
    a = _as_matrix(a, "a")
    if a.shape[0] != a.shape[1]:
        raise ContractError(f"expected a square matrix, got {a.shape}")
    if jitter < 0:
        raise ContractError("jitter must be nonnegative")
    if not np.all(np.isfinite(a)):
        raise ContractError("matrix has non-finite entries")
    n = a.shape[0]
    sym = (a + a.T) / 2
    if not np.issubdtype(sym.dtype, np.floating):
        sym = sym.astype(np.float64)
    (potrf,) = get_lapack_funcs(("potrf",), (sym,))
    eye = np.eye(n, dtype=sym.dtype)

    current = float(jitter)
    for attempt in range(MAX_JITTER_RETRIES + 1):
        if attempt:
            current = current * JITTER_GROWTH if current > 0 else DEFAULT_JITTER
        shifted = sym + current * eye if current else sym
        lower, info = potrf(shifted, lower=True, clean=True, overwrite_a=False)
        if info == 0 and np.all(np.diag(lower) > 0):
            return SpdFactor(lower=lower, jitter=current)
        if info < 0:
            raise ContractError(f"potrf rejected argument {-info}")
        pivot = int(info) if info > 0 else int(np.argmin(np.diag(lower))) + 1
    raise SingularMatrixError(pivot=pivot, jitter=current, dim=n)


def spd_solve(f: SpdFactor, b) -> np.ndarray:
    """Solve ``(sym(a) + jitter I) x = b`` from a factor."""
    b = np.asarray(b)
    if b.shape[0] != f.dim:
        raise ContractError(f"factor has dim {f.dim}, right-hand side has {b.shape[0]} rows")
    return cho_solve((f.lower, True), b, check_finite=False)


def kron(a, b, max_entries: int = MAX_KRON_ENTRIES) -> np.ndarray:
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    rows = a.shape[0] * b.shape[0]
    cols = a.shape[1] * b.shape[1]
    if rows * cols > max_entries:
        raise SizeError(f"kron result {rows}x{cols} exceeds {max_entries} entries")
    return np.kron(a, b)
