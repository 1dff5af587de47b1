"""Dense float64 kernels shared by every other module.

A "matrix" throughout this package is a 2-D, C-contiguous, float64 numpy
array (row-major). All kernels are pure functions; results are validated
to be finite before they are returned.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation

# Norms below this are treated as zero vectors in cosine_similarity.
ZERO_NORM_EPS = 1e-12


def as_matrix(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Coerce to a C-contiguous float64 2-D array, rejecting non-finite data."""
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ContractViolation(f"{name} must be 2-D, got ndim={out.ndim}")
    if not np.isfinite(out).all():
        raise ContractViolation(f"{name} contains non-finite entries")
    return out


def _check_finite(a: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(a).all():
        raise ContractViolation(f"{op} produced non-finite entries")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Standard matrix product with an explicit inner-dimension check."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(
            f"matmul dimension mismatch: ({a.shape[0]}x{a.shape[1]}) @ ({b.shape[0]}x{b.shape[1]})"
        )
    return _check_finite(a @ b, "matmul")


def causal_softmax(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax with a causal mask for square inputs.

    Square L x L input (prompt mode): entry (i, j) with j > i is masked to
    exactly 0 and each row is normalized over columns 0..i. A single-row
    input (generation mode) is a plain softmax over the whole row.
    Every unmasked row sums to 1 within 1e-12.
    """
    scores = as_matrix(scores, "scores")
    rows, cols = scores.shape
    if rows == 0 or cols == 0:
        raise ContractViolation("causal_softmax requires a nonempty matrix")
    if rows == 1:
        shifted = scores - scores.max()
        expd = np.exp(shifted)
        return _check_finite(expd / expd.sum(), "causal_softmax")
    if rows != cols:
        raise ContractViolation(
            f"causal_softmax expects a square matrix or a single row, got {rows}x{cols}"
        )
    future = np.triu(np.ones((rows, cols), dtype=bool), k=1)
    masked = np.where(future, -np.inf, scores)
    shifted = masked - masked.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    out = expd / expd.sum(axis=1, keepdims=True)
    # exp(-inf) is already 0.0; keep the mask exact regardless of rounding.
    out[future] = 0.0
    return _check_finite(out, "causal_softmax")


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1].

    A vector with norm below ZERO_NORM_EPS has no direction; such pairs
    return 0.0 so degenerate keys never clear a positive match threshold.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ContractViolation(f"cosine_similarity length mismatch: {a.size} vs {b.size}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < ZERO_NORM_EPS or nb < ZERO_NORM_EPS:
        return 0.0
    return float(np.clip(float(a @ b) / (na * nb), -1.0, 1.0))


def cosine_similarity_matrix(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities between the rows of two matrices.

    Vectorized form of cosine_similarity with the same zero-norm rule:
    any pair involving a near-zero row scores exactly 0.
    """
    rows = as_matrix(rows, "rows")
    cols = as_matrix(cols, "cols")
    if rows.shape[1] != cols.shape[1]:
        raise ContractViolation(
            f"cosine_similarity_matrix dim mismatch: {rows.shape[1]} vs {cols.shape[1]}"
        )
    rn = np.linalg.norm(rows, axis=1)
    cn = np.linalg.norm(cols, axis=1)
    safe_rn = np.where(rn < ZERO_NORM_EPS, 1.0, rn)
    safe_cn = np.where(cn < ZERO_NORM_EPS, 1.0, cn)
    sim = (rows / safe_rn[:, None]) @ (cols / safe_cn[:, None]).T
    sim[rn < ZERO_NORM_EPS, :] = 0.0
    sim[:, cn < ZERO_NORM_EPS] = 0.0
    return np.clip(sim, -1.0, 1.0)


def column_sum_variance(a: np.ndarray) -> float:
    """Population variance of the per-column sums of a matrix."""
    a = as_matrix(a, "a")
    if a.shape[1] < 1:
        raise ContractViolation("column_sum_variance requires at least one column")
    sums = a.sum(axis=0)
    return float(np.var(sums))
