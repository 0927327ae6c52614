"""Log-Euclidean geometry primitives for symmetric positive definite matrices.

Everything operates on float64 numpy arrays. Functions accept stacks of
matrices: the trailing two axes are the matrix axes, leading axes are
broadcast-free batch axes. Returned symmetric matrices are symmetrized
explicitly so that ``M[i, j] == M[j, i]`` holds exactly.
"""

from __future__ import annotations

import warnings
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InvalidInput, NotPositiveDefinite, NumericalFailure, NumericsWarning

# Eigenvalues below EIG_FLOOR_RATIO * spectral_radius are treated as roundoff
# artifacts of epsilon-regularized matrices and clamped before taking logs.
EIG_FLOOR_RATIO = 1e-12


class EigenPair(NamedTuple):
    """Eigendecomposition ``S = vectors @ diag(values) @ vectors.T``.

    ``values`` are in descending order; each eigenvector's largest-magnitude
    entry is positive, which pins an otherwise arbitrary sign.
    """

    vectors: np.ndarray
    values: np.ndarray


def _as_square(S, name: str = "matrix") -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.ndim < 2 or S.shape[-1] != S.shape[-2]:
        raise InvalidInput(f"{name} must be square, got shape {S.shape}")
    if not np.all(np.isfinite(S)):
        raise InvalidInput(f"{name} contains non-finite entries")
    return S


def symmetrize(S) -> np.ndarray:
    """Return ``(S + S.T) / 2`` over the trailing two axes."""
    S = np.asarray(S, dtype=np.float64)
    return 0.5 * (S + np.swapaxes(S, -1, -2))


def sym_eig(S) -> EigenPair:
    """Eigendecomposition of a symmetric matrix with deterministic conventions.

    Eigenvalues are sorted descending (stable for ties); each eigenvector is
    flipped so its largest-magnitude entry is positive.

    Raises
    ------
    InvalidInput
        For non-finite or non-square input.
    NumericalFailure
        If the underlying iteration does not converge.
    """
    S = _as_square(S)
    try:
        values, vectors = np.linalg.eigh(symmetrize(S))
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK rarely fails
        raise NumericalFailure(f"eigendecomposition did not converge: {exc}") from exc
    order = np.argsort(-values, axis=-1, kind="stable")
    values = np.take_along_axis(values, order, axis=-1)
    vectors = np.take_along_axis(vectors, order[..., None, :], axis=-1)
    # Sign convention: largest-|entry| of each eigenvector is positive.
    pick = np.argmax(np.abs(vectors), axis=-2)
    lead = np.take_along_axis(vectors, pick[..., None, :], axis=-2)
    vectors = vectors * np.where(lead < 0.0, -1.0, 1.0)
    return EigenPair(vectors=vectors, values=values)


def _recompose(vectors: np.ndarray, values: np.ndarray) -> np.ndarray:
    out = (vectors * values[..., None, :]) @ np.swapaxes(vectors, -1, -2)
    return symmetrize(out)


def matrix_log(S) -> np.ndarray:
    """Matrix logarithm of an SPD matrix via eigendecomposition.

    Eigenvalues in ``(0, 1e-12 * sigma_max]`` are clamped to that floor with a
    :class:`NumericsWarning`; eigenvalues <= 0 raise.
    """
    vectors, values = sym_eig(S)
    if np.any(values <= 0.0):
        raise NotPositiveDefinite(
            f"matrix log requires positive eigenvalues, min is {values.min():.3e}"
        )
    floor = EIG_FLOOR_RATIO * values.max(axis=-1, keepdims=True)
    if np.any(values <= floor):
        warnings.warn(
            "eigenvalues at roundoff scale were clamped before log",
            NumericsWarning,
            stacklevel=2,
        )
        values = np.maximum(values, floor)
    return _recompose(vectors, np.log(values))


def matrix_exp(A) -> np.ndarray:
    """Matrix exponential of a symmetric matrix via eigendecomposition."""
    vectors, values = sym_eig(A)
    if np.any(values > 709.0):  # exp overflows float64 just above this
        raise NumericalFailure(f"matrix exp overflow, max eigenvalue {values.max():.3e}")
    return _recompose(vectors, np.exp(values))


def regularize(S, eps: float) -> np.ndarray:
    """Symmetrize and add ``eps * I``; the result must be positive definite."""
    if not eps > 0.0:
        raise InvalidInput(f"eps must be positive, got {eps}")
    S = _as_square(S)
    out = symmetrize(S)
    n = out.shape[-1]
    out = out + eps * np.eye(n)
    if np.any(np.linalg.eigvalsh(out) <= 0.0):
        raise NotPositiveDefinite(f"matrix has an eigenvalue below -{eps}")
    return out


def le_distance(A, B) -> np.ndarray:
    """Log-Euclidean distance ``||log A - log B||_F``.

    Symmetric in its arguments, zero iff ``A == B``, and satisfies the
    triangle inequality (it is a Euclidean distance in log coordinates).
    """
    A = _as_square(A, "A")
    B = _as_square(B, "B")
    if A.shape[-1] != B.shape[-1]:
        raise InvalidInput(f"dimension mismatch: {A.shape[-1]} vs {B.shape[-1]}")
    diff = matrix_log(A) - matrix_log(B)
    return np.sqrt(np.sum(diff * diff, axis=(-2, -1)))


def le_weighted_mean(weights, mats) -> np.ndarray:
    """Log-Euclidean weighted Fréchet mean ``exp(sum_j w_j log V_j)``.

    ``weights`` must be nonnegative and sum to 1 within 1e-9. This is the
    closed-form minimizer of ``sum_j w_j d_LE(P, V_j)^2``.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 1 or weights.size == 0:
        raise InvalidInput("weights must be a nonempty 1-d sequence")
    if np.any(weights < 0.0):
        raise InvalidInput("weights must be nonnegative")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise InvalidInput(f"weights must sum to 1, got {weights.sum()!r}")
    mats = [_as_square(M, f"mats[{i}]") for i, M in enumerate(mats)]
    if len(mats) != weights.size:
        raise InvalidInput(f"{weights.size} weights for {len(mats)} matrices")
    dims = {M.shape[-1] for M in mats}
    if len(dims) != 1:
        raise InvalidInput(f"matrices have mixed dimensions {sorted(dims)}")
    logs = np.stack([matrix_log(M) for M in mats], axis=0)
    mean_log = np.tensordot(weights, logs, axes=(0, 0))
    return matrix_exp(mean_log)


def covariance_spd(epoch, eps: float) -> np.ndarray:
    """Sample covariance (divisor L, mean-centered) of an ``(..., N, L)``
    epoch plus ``eps * I``."""
    epoch = np.asarray(epoch, dtype=np.float64)
    if epoch.ndim < 2 or epoch.shape[-1] < 1:
        raise InvalidInput(f"epoch must be (..., N, L) with L >= 1, got {epoch.shape}")
    if not np.all(np.isfinite(epoch)):
        raise InvalidInput("epoch contains non-finite entries")
    if not eps > 0.0:
        raise InvalidInput(f"eps must be positive, got {eps}")
    n_samples = epoch.shape[-1]
    centered = epoch - epoch.mean(axis=-1, keepdims=True)
    cov = centered @ np.swapaxes(centered, -1, -2) / n_samples
    return symmetrize(cov) + eps * np.eye(epoch.shape[-2])


def vec_upper(A) -> np.ndarray:
    """Flatten a symmetric matrix into its upper triangle, row-major, with
    off-diagonal entries scaled by sqrt(2).

    The scaling makes the vector 2-norm equal the Frobenius norm of ``A``, so
    Euclidean operations on the vectors are Log-Euclidean-consistent.
    """
    A = _as_square(A)
    n = A.shape[-1]
    rows, cols = np.triu_indices(n)
    vec = A[..., rows, cols].copy()
    vec[..., rows != cols] *= np.sqrt(2.0)
    return vec


def unvec_upper(vec) -> np.ndarray:
    """Inverse of :func:`vec_upper` (off-diagonal entries may differ by one
    ulp from the original because sqrt(2) is not exactly representable)."""
    vec = np.asarray(vec, dtype=np.float64)
    n = round_dim(vec.shape[-1])
    rows, cols = np.triu_indices(n)
    entries = vec.copy()
    entries[..., rows != cols] /= np.sqrt(2.0)
    out = np.zeros(vec.shape[:-1] + (n, n))
    out[..., rows, cols] = entries
    out[..., cols, rows] = entries
    return out


def round_dim(m: int) -> int:
    """Matrix dimension n with n(n+1)/2 == m."""
    n = int((np.sqrt(8.0 * m + 1.0) - 1.0) / 2.0 + 0.5)
    if n * (n + 1) // 2 != m:
        raise InvalidInput(f"length {m} is not a triangular number")
    return n


def vec_dim(n: int) -> int:
    """Length of the tangent vector for an n x n symmetric matrix."""
    return n * (n + 1) // 2


def min_eigenvalue(S) -> np.ndarray:
    """Smallest eigenvalue over the trailing matrix axes (audit helper)."""
    return np.linalg.eigvalsh(symmetrize(_as_square(S)))[..., 0]
