"""SPD network layers: bilinear congruence (BiMap), eigenvalue thresholding
(ReEig), tangent projection (LogEig), and their analytic backward passes.

Backward passes for the eigenvalue-function layers use the Loewner
(divided-difference) matrix: for ``f(S) = U g(Sigma) U^T`` with
``S = U Sigma U^T`` and upstream gradient ``G``,

    dL/dS = U (L o (U^T sym(G) U)) U^T,   L_ij = (g(s_i) - g(s_j)) / (s_i - s_j)

with the analytic limit ``g'`` on (near-)degenerate pairs, followed by a
final symmetrization so the gradient stays in the tangent space of the
symmetric matrices.

All functions accept stacks over leading axes, same as :mod:`geospd.spd`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Union

import numpy as np

from .errors import InvalidInput, NotPositiveDefinite, NumericalFailure
from .spd import sym_eig, symmetrize

# Eigenvalue pairs closer than this (relative to the spectral radius) take the
# derivative limit instead of the divided difference.
DEGENERACY_RATIO = 1e-10

ORTHOGONALITY_TOL = 1e-8


@dataclass(frozen=True)
class BiMapWeight:
    """Semi-orthogonal d x l weight of a bilinear congruence layer.

    ``matrix.T @ matrix`` must equal the identity within 1e-8 in Frobenius
    norm, which implies full column rank and keeps congruences SPD-preserving.
    """

    matrix: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.matrix, dtype=np.float64)
        if W.ndim != 2 or W.shape[1] > W.shape[0]:
            raise InvalidInput(f"weight must be d x l with l <= d, got {W.shape}")
        if not np.all(np.isfinite(W)):
            raise InvalidInput("weight contains non-finite entries")
        drift = orthogonality_drift(W)
        if drift > ORTHOGONALITY_TOL:
            raise InvalidInput(f"weight is not semi-orthogonal, ||W^T W - I||_F = {drift:.3e}")
        object.__setattr__(self, "matrix", W)

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]


class LayerGrad(NamedTuple):
    """Gradients of a BiMap layer: symmetric w.r.t. the input matrix and
    Euclidean (pre-retraction) w.r.t. the weight."""

    wrt_input: np.ndarray
    wrt_weight: np.ndarray


def orthogonality_drift(W) -> float:
    """``||W^T W - I||_F``, the semi-orthogonality defect."""
    W = np.asarray(W, dtype=np.float64)
    gram = W.T @ W
    return float(np.linalg.norm(gram - np.eye(W.shape[1])))


def _weight_matrix(W: Union[BiMapWeight, np.ndarray]) -> np.ndarray:
    return W.matrix if isinstance(W, BiMapWeight) else np.asarray(W, dtype=np.float64)


def bimap_forward(W, S) -> np.ndarray:
    """Bilinear congruence ``W^T S W`` mapping d x d SPD to l x l SPD."""
    Wm = _weight_matrix(W)
    S = np.asarray(S, dtype=np.float64)
    if S.shape[-1] != Wm.shape[0]:
        raise InvalidInput(f"input dim {S.shape[-1]} does not match weight rows {Wm.shape[0]}")
    return symmetrize(Wm.T @ S @ Wm)


def bimap_backward(W, S, upstream) -> LayerGrad:
    """Gradients of ``<G, W^T S W>`` for symmetric upstream ``G``:
    ``dS = sym(W G W^T)`` and ``dW = 2 S W G``."""
    Wm = _weight_matrix(W)
    S = np.asarray(S, dtype=np.float64)
    G = np.asarray(upstream, dtype=np.float64)
    if G.shape[-1] != Wm.shape[1]:
        raise InvalidInput(f"upstream dim {G.shape[-1]} does not match weight cols {Wm.shape[1]}")
    if S.shape[-1] != Wm.shape[0]:
        raise InvalidInput(f"input dim {S.shape[-1]} does not match weight rows {Wm.shape[0]}")
    wrt_input = symmetrize(Wm @ G @ Wm.T)
    wrt_weight = 2.0 * (S @ Wm @ G)
    return LayerGrad(wrt_input=wrt_input, wrt_weight=wrt_weight)


def _loewner(values: np.ndarray, g: Callable, gprime: Callable) -> np.ndarray:
    """Divided-difference matrix of g over an eigenvalue vector, with the
    derivative limit at the midpoint for (near-)coincident pairs."""
    gv = g(values)
    num = gv[..., :, None] - gv[..., None, :]
    den = values[..., :, None] - values[..., None, :]
    scale = np.maximum(np.abs(values).max(axis=-1), np.finfo(np.float64).tiny)
    near = np.abs(den) < DEGENERACY_RATIO * scale[..., None, None]
    mid = 0.5 * (values[..., :, None] + values[..., None, :])
    return np.where(near, gprime(mid), num / np.where(near, 1.0, den))


def eig_function_backward(vectors, values, upstream, g: Callable, gprime: Callable) -> np.ndarray:
    """Loewner-form backward of ``S -> U g(Sigma) U^T`` given the cached
    eigendecomposition of S."""
    G = symmetrize(np.asarray(upstream, dtype=np.float64))
    L = _loewner(values, g, gprime)
    inner = np.swapaxes(vectors, -1, -2) @ G @ vectors
    return symmetrize(vectors @ (L * inner) @ np.swapaxes(vectors, -1, -2))


def _eig_function_backward(S, upstream, g: Callable, gprime: Callable) -> np.ndarray:
    vectors, values = sym_eig(S)
    return eig_function_backward(vectors, values, upstream, g, gprime)


def reeig_forward(S, threshold: float) -> np.ndarray:
    """Clamp eigenvalues of ``S`` from below at ``threshold``; eigenvectors
    are unchanged, so the output spectrum is ``max(sigma, threshold)``."""
    if not threshold > 0.0:
        raise InvalidInput(f"threshold must be positive, got {threshold}")
    vectors, values = sym_eig(S)
    clamped = np.maximum(values, threshold)
    return symmetrize((vectors * clamped[..., None, :]) @ np.swapaxes(vectors, -1, -2))


def reeig_backward(S, threshold: float, upstream) -> np.ndarray:
    """Backward pass of :func:`reeig_forward`; the clamp derivative is the
    indicator ``sigma > threshold``."""
    if not threshold > 0.0:
        raise InvalidInput(f"threshold must be positive, got {threshold}")
    g = lambda x: np.maximum(x, threshold)
    gprime = lambda x: np.where(x > threshold, 1.0, 0.0)
    return _eig_function_backward(S, upstream, g, gprime)


def logeig_backward(S, upstream) -> np.ndarray:
    """Backward pass of the matrix logarithm: pulls a tangent-space gradient
    (``upstream = dL/d log(S)``) back to a symmetric gradient at ``S``."""
    vectors, values = sym_eig(S)
    if np.any(values <= 0.0):
        raise NotPositiveDefinite(
            f"log backward requires positive eigenvalues, min is {values.min():.3e}"
        )
    G = symmetrize(np.asarray(upstream, dtype=np.float64))
    L = _loewner(values, np.log, lambda x: 1.0 / x)
    inner = np.swapaxes(vectors, -1, -2) @ G @ vectors
    return symmetrize(vectors @ (L * inner) @ np.swapaxes(vectors, -1, -2))


def expeig_backward(A, upstream) -> np.ndarray:
    """Backward pass of the matrix exponential of a symmetric matrix."""
    return _eig_function_backward(A, upstream, np.exp, np.exp)


def stiefel_tangent_project(W, euclid_grad) -> np.ndarray:
    """Project an ambient gradient onto the Stiefel tangent at ``W``:
    ``G - W sym(W^T G)``."""
    Wm = _weight_matrix(W)
    G = np.asarray(euclid_grad, dtype=np.float64)
    if G.shape != Wm.shape:
        raise InvalidInput(f"gradient shape {G.shape} does not match weight {Wm.shape}")
    return G - Wm @ symmetrize(Wm.T @ G)


def stiefel_retract(W, euclid_grad, lr: float) -> BiMapWeight:
    """Projected-gradient step with thin-QR retraction.

    Moves ``W`` against the tangent projection of ``euclid_grad`` and
    re-orthonormalizes by QR with the positive-diagonal-R convention, so the
    result is a valid :class:`BiMapWeight` regardless of step size.
    """
    if not lr > 0.0:
        raise InvalidInput(f"lr must be positive, got {lr}")
    Wm = _weight_matrix(W)
    step = stiefel_tangent_project(Wm, euclid_grad)
    moved = Wm - lr * step
    Q, R = np.linalg.qr(moved)
    diag = np.diagonal(R)
    if np.any(np.abs(diag) < 1e-12 * max(1.0, float(np.abs(diag).max(initial=0.0)))):
        raise NumericalFailure("rank collapse in QR retraction")
    Q = Q * np.where(diag < 0.0, -1.0, 1.0)
    return BiMapWeight(matrix=Q)
