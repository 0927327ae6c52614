"""Manifold cross-attention: graph-derived queries modulate signal-derived
keys/values entirely on the SPD manifold.

Scores are a bounded decay of the Log-Euclidean distance between key and
query, rows are softmax-normalized with a temperature, and values are
aggregated with a Log-Euclidean weighted mean, so every intermediate stays
SPD. All functions accept an optional leading batch axis in front of the
epoch axis ``T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InvalidInput
from .layers import bimap_forward, eig_function_backward, symmetrize, _weight_matrix
from .spd import sym_eig

# Distances below this are treated as zero when normalizing difference
# directions in the backward pass (the score itself is exactly 1 there).
_DIST_FLOOR = 1e-300


@dataclass(frozen=True)
class AttentionWeights:
    """Row-stochastic attention weights plus the raw affinity scores."""

    weights: np.ndarray      # (..., T, T), rows sum to 1
    raw_scores: np.ndarray   # (..., T, T), entries in (0, 1]
    temperature: float


class AttentionGrads(NamedTuple):
    wrt_s: np.ndarray
    wrt_c: np.ndarray
    wrt_wq: np.ndarray
    wrt_wk: np.ndarray
    wrt_wv: np.ndarray


@dataclass
class AttentionCache:
    """Forward values reused by :func:`attention_backward`."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    s_seq: np.ndarray
    c_seq: np.ndarray
    keys: np.ndarray
    queries: np.ndarray
    values: np.ndarray
    key_eig: tuple
    query_eig: tuple
    value_eig: tuple
    log_keys: np.ndarray
    log_queries: np.ndarray
    log_values: np.ndarray
    distances: np.ndarray
    scores: np.ndarray
    weights: np.ndarray
    temperature: float
    mixed_log: np.ndarray
    mixed_eig: tuple
    out: np.ndarray


def project_qkv(wq, wk, wv, s_seq, c_seq, eps: float = 1e-4):
    """BiMap-project the signal SPD sequence to keys/values and the graph SPD
    sequence to queries, shifting each output by ``eps * I`` so downstream
    logs stay well posed under roundoff."""
    s_seq = np.asarray(s_seq, dtype=np.float64)
    c_seq = np.asarray(c_seq, dtype=np.float64)
    if s_seq.shape[:-2] != c_seq.shape[:-2]:
        raise InvalidInput(
            f"signal and graph sequences differ in length: {s_seq.shape} vs {c_seq.shape}"
        )
    if not eps > 0.0:
        raise InvalidInput(f"eps must be positive, got {eps}")
    l = _weight_matrix(wk).shape[1]
    if _weight_matrix(wv).shape[1] != l or _weight_matrix(wq).shape[1] != l:
        raise InvalidInput("query/key/value projections must share the output dimension")
    shift = eps * np.eye(l)
    keys = bimap_forward(wk, s_seq) + shift
    values = bimap_forward(wv, s_seq) + shift
    queries = bimap_forward(wq, c_seq) + shift
    return queries, keys, values


def _log_from_eig(vectors, values):
    if np.any(values <= 0.0):
        from .errors import NotPositiveDefinite

        raise NotPositiveDefinite(
            f"attention inputs must be positive definite, min eigenvalue {values.min():.3e}"
        )
    out = (vectors * np.log(values)[..., None, :]) @ np.swapaxes(vectors, -1, -2)
    return symmetrize(out)


def _pairwise_distances(log_keys, log_queries):
    # (..., T, l, l) x (..., T, l, l) -> distances (..., T_key, T_query)
    diff = log_keys[..., :, None, :, :] - log_queries[..., None, :, :, :]
    return np.sqrt(np.sum(diff * diff, axis=(-2, -1))), diff


def attention_scores(k_seq, q_seq) -> np.ndarray:
    """Affinity ``1 / (1 + ln(1 + d_LE(K_t, Q_j)))`` for every key/query pair.

    Entries lie in (0, 1], equal 1 exactly when the key and query coincide,
    and decrease strictly with distance.
    """
    k_seq = np.asarray(k_seq, dtype=np.float64)
    q_seq = np.asarray(q_seq, dtype=np.float64)
    if k_seq.shape != q_seq.shape:
        raise InvalidInput(f"key/query shape mismatch: {k_seq.shape} vs {q_seq.shape}")
    kvec, kval = sym_eig(k_seq)
    qvec, qval = sym_eig(q_seq)
    log_k = _log_from_eig(kvec, kval)
    log_q = _log_from_eig(qvec, qval)
    distances, _ = _pairwise_distances(log_k, log_q)
    return 1.0 / (1.0 + np.log1p(distances))


def softmax_rows(scores, temperature: float) -> AttentionWeights:
    """Temperature softmax over each row, stabilized by max subtraction."""
    if not temperature > 0.0:
        raise InvalidInput(f"temperature must be positive, got {temperature}")
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise InvalidInput("scores contain non-finite entries")
    scaled = scores / temperature
    shifted = scaled - scaled.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    weights = e / e.sum(axis=-1, keepdims=True)
    return AttentionWeights(weights=weights, raw_scores=scores, temperature=temperature)


def attend(weights, v_seq) -> np.ndarray:
    """Log-Euclidean weighted mean of the values under each row of weights:
    ``exp(sum_j a_tj log V_j)`` per output epoch t."""
    a = weights.weights if isinstance(weights, AttentionWeights) else np.asarray(weights)
    v_seq = np.asarray(v_seq, dtype=np.float64)
    if a.shape[-1] != v_seq.shape[-3]:
        raise InvalidInput(
            f"weight columns ({a.shape[-1]}) must match value count ({v_seq.shape[-3]})"
        )
    vvec, vval = sym_eig(v_seq)
    log_v = _log_from_eig(vvec, vval)
    mixed = np.einsum("...tj,...jab->...tab", a, log_v)
    mvec, mval = sym_eig(mixed)
    return symmetrize((mvec * np.exp(mval)[..., None, :]) @ np.swapaxes(mvec, -1, -2))


def attention_forward(wq, wk, wv, s_seq, c_seq, eps: float = 1e-4,
                      temperature: float = 1.0):
    """Full modulation pass; returns the modulated SPD sequence and a cache
    for the backward pass."""
    queries, keys, values = project_qkv(wq, wk, wv, s_seq, c_seq, eps)
    key_eig = sym_eig(keys)
    query_eig = sym_eig(queries)
    value_eig = sym_eig(values)
    log_keys = _log_from_eig(*key_eig)
    log_queries = _log_from_eig(*query_eig)
    log_values = _log_from_eig(*value_eig)
    distances, _ = _pairwise_distances(log_keys, log_queries)
    scores = 1.0 / (1.0 + np.log1p(distances))
    attn = softmax_rows(scores, temperature)
    mixed = np.einsum("...tj,...jab->...tab", attn.weights, log_values)
    mixed_eig = sym_eig(mixed)
    mvec, mval = mixed_eig
    out = symmetrize((mvec * np.exp(mval)[..., None, :]) @ np.swapaxes(mvec, -1, -2))
    cache = AttentionCache(
        wq=_weight_matrix(wq), wk=_weight_matrix(wk), wv=_weight_matrix(wv),
        s_seq=np.asarray(s_seq, dtype=np.float64),
        c_seq=np.asarray(c_seq, dtype=np.float64),
        keys=keys, queries=queries, values=values,
        key_eig=key_eig, query_eig=query_eig, value_eig=value_eig,
        log_keys=log_keys, log_queries=log_queries, log_values=log_values,
        distances=distances, scores=scores, weights=attn.weights,
        temperature=temperature, mixed_log=mixed, mixed_eig=mixed_eig, out=out,
    )
    return out, cache


def attention_backward(cache: AttentionCache, upstream) -> AttentionGrads:
    """Gradients of a scalar loss through the whole modulation pass, given
    ``upstream = dL/d S~`` for every output epoch."""
    g_out = symmetrize(np.asarray(upstream, dtype=np.float64))
    if g_out.shape != cache.out.shape:
        raise InvalidInput(f"upstream shape {g_out.shape} != output shape {cache.out.shape}")

    # Exponential map at the mixed log-domain point.
    d_mixed = eig_function_backward(*cache.mixed_eig, g_out, np.exp, np.exp)

    # Split into the value-log and weight paths.
    d_log_values = np.einsum("...tj,...tab->...jab", cache.weights, d_mixed)
    d_weights = np.einsum("...tab,...jab->...tj", d_mixed, cache.log_values)

    # Softmax rows (temperature-scaled).
    inner = (cache.weights * d_weights).sum(axis=-1, keepdims=True)
    d_scores = cache.weights * (d_weights - inner) / cache.temperature

    # Score = 1 / (1 + log1p(D)).
    d_dist = -d_scores * cache.scores * cache.scores / (1.0 + cache.distances)

    # Distance direction (guard exact coincidence, where the score is flat-1).
    diff = cache.log_keys[..., :, None, :, :] - cache.log_queries[..., None, :, :, :]
    safe = np.maximum(cache.distances, _DIST_FLOOR)
    ray = d_dist / safe
    d_log_keys = np.einsum("...tj,...tjab->...tab", ray, diff)
    d_log_queries = -np.einsum("...tj,...tjab->...jab", ray, diff)

    # Matrix-log pullbacks at K, Q, V.
    inv = lambda x: 1.0 / x
    d_keys = eig_function_backward(*cache.key_eig, d_log_keys, np.log, inv)
    d_queries = eig_function_backward(*cache.query_eig, d_log_queries, np.log, inv)
    d_values = eig_function_backward(*cache.value_eig, d_log_values + 0.0, np.log, inv)

    # BiMap congruences (the eps shift has identity derivative).
    wrt_s = symmetrize(cache.wk @ d_keys @ cache.wk.T) + symmetrize(
        cache.wv @ d_values @ cache.wv.T
    )
    wrt_c = symmetrize(cache.wq @ d_queries @ cache.wq.T)
    d_in, l = cache.wk.shape
    dq_in = cache.wq.shape[0]
    s_flat = cache.s_seq.reshape(-1, d_in, d_in)
    c_flat = cache.c_seq.reshape(-1, dq_in, dq_in)
    wrt_wk = 2.0 * np.einsum("bij,jk,bkl->il", s_flat, cache.wk, d_keys.reshape(-1, l, l))
    wrt_wv = 2.0 * np.einsum("bij,jk,bkl->il", s_flat, cache.wv, d_values.reshape(-1, l, l))
    wrt_wq = 2.0 * np.einsum("bij,jk,bkl->il", c_flat, cache.wq, d_queries.reshape(-1, l, l))
    return AttentionGrads(wrt_s=wrt_s, wrt_c=wrt_c, wrt_wq=wrt_wq, wrt_wk=wrt_wk, wrt_wv=wrt_wv)
