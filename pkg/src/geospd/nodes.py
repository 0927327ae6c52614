"""Custom tape nodes for the manifold operations.

Each op dispatches like the autodiff primitives: plain arrays compute
directly, tape Vars additionally record a node whose backward rule comes
from :mod:`geospd.layers` / :mod:`geospd.attention` instead of primitive
composition.
"""

from __future__ import annotations

import warnings

import numpy as np

from . import autodiff as ad
from .attention import attention_backward, attention_forward
from .errors import NotPositiveDefinite, NumericsWarning
from .layers import eig_function_backward
from .spd import covariance_spd, symmetrize, sym_eig, vec_upper


def covariance_op(x, eps: float):
    """Mean-centered covariance over the last axis plus ``eps * I``."""
    xd = ad._data(x)
    out = covariance_spd(xd, eps)
    if not isinstance(x, ad.Var):
        return out
    n_samples = xd.shape[-1]
    centered = xd - xd.mean(axis=-1, keepdims=True)

    def vjp(g):
        gs = (g + np.swapaxes(g, -1, -2)) / n_samples
        gx = gs @ centered
        return (gx - gx.mean(axis=-1, keepdims=True),)

    return ad.custom([x], out, vjp)


def reeig_op(s, threshold: float):
    """Eigenvalue clamp with the indicator-derivative backward."""
    sd = ad._data(s)
    vectors, values = sym_eig(sd)
    clamped = np.maximum(values, threshold)
    out = symmetrize((vectors * clamped[..., None, :]) @ np.swapaxes(vectors, -1, -2))
    if not isinstance(s, ad.Var):
        return out

    def vjp(g):
        grad = eig_function_backward(
            vectors, values, g,
            lambda x: np.maximum(x, threshold),
            lambda x: np.where(x > threshold, 1.0, 0.0),
        )
        return (grad,)

    return ad.custom([s], out, vjp)


def tangent_op(s):
    """LogEig followed by the scaled upper-triangle flattening: maps
    ``(..., l, l)`` SPD to ``(..., l(l+1)/2)`` tangent coordinates."""
    sd = ad._data(s)
    vectors, values = sym_eig(sd)
    if np.any(values <= 0.0):
        raise NotPositiveDefinite(
            f"tangent projection needs positive eigenvalues, min is {values.min():.3e}"
        )
    log_mat = symmetrize((vectors * np.log(values)[..., None, :]) @ np.swapaxes(vectors, -1, -2))
    out = vec_upper(log_mat)
    if not isinstance(s, ad.Var):
        return out
    n = sd.shape[-1]
    rows, cols = np.triu_indices(n)
    off = rows != cols

    def vjp(g):
        entries = g.copy()
        entries[..., off] /= np.sqrt(2.0)
        G = np.zeros(g.shape[:-1] + (n, n))
        G[..., rows, cols] = entries
        G[..., cols, rows] = entries
        grad = eig_function_backward(vectors, values, G, np.log, lambda x: 1.0 / x)
        return (grad,)

    return ad.custom([s], out, vjp)


def attention_op(wq, wk, wv, s_seq, c_seq, eps: float, temperature: float):
    """Manifold cross-attention as one tape node; returns the modulated SPD
    stack and the forward cache (attention weights live in the cache)."""
    datas = [ad._data(v) for v in (wq, wk, wv, s_seq, c_seq)]
    out, cache = attention_forward(*datas, eps=eps, temperature=temperature)
    if not any(isinstance(v, ad.Var) for v in (wq, wk, wv, s_seq, c_seq)):
        return out, cache

    def vjp(g):
        grads = attention_backward(cache, g)
        return (grads.wrt_wq, grads.wrt_wk, grads.wrt_wv, grads.wrt_s, grads.wrt_c)

    return ad.custom([wq, wk, wv, s_seq, c_seq], out, vjp), cache


def cross_entropy_op(logits, labels):
    """Mean cross-entropy of ``(B, C)`` logits against integer labels."""
    ld = ad._data(logits)
    y = np.asarray(labels, dtype=int)
    shifted = ld - ld.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    batch = ld.shape[0]
    out = -log_probs[np.arange(batch), y].mean()
    if not isinstance(logits, ad.Var):
        return out
    probs = np.exp(log_probs)

    def vjp(g):
        grad = probs.copy()
        grad[np.arange(batch), y] -= 1.0
        return (grad * (g / batch),)

    return ad.custom([logits], np.asarray(out), vjp)


def row_normalize_op(x):
    """Scale each row to unit 2-norm; zero rows stay zero (with a warning),
    which downstream cosine similarities read as similarity 0."""
    xd = ad._data(x)
    norms = np.linalg.norm(xd, axis=-1, keepdims=True)
    dead = norms == 0.0
    if np.any(dead):
        warnings.warn("zero-norm embedding rows; cosine treated as 0",
                      NumericsWarning, stacklevel=2)
    safe = np.where(dead, 1.0, norms)
    out = xd / safe
    if not isinstance(x, ad.Var):
        return out

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return ((g - out * inner) / safe,)

    return ad.custom([x], out, vjp)
