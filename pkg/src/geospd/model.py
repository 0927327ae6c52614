"""End-to-end model: spatiotemporal encoder -> signal SPD sequence, dynamic
graph -> graph SPD sequence, manifold cross-attention, eigenvalue filtering,
tangent projection, classifier; the combined task/alignment loss; metrics;
and the alternating (meta) optimizer that keeps BiMap weights on the Stiefel
manifold.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .errors import InvalidInput, MetricsWarning, NumericalFailure
from .graph import (GnnParams, GraphStructure, GruParams, build_graph_structure,
                    encode_graph_batch, init_gnn, init_gru)
from .layers import orthogonality_drift, stiefel_retract
from .nodes import (attention_op, covariance_op, cross_entropy_op, reeig_op,
                    row_normalize_op, tangent_op)
from .spd import min_eigenvalue, vec_dim


@dataclass(frozen=True)
class ModelConfig:
    """Shapes and hyperparameters of the full pipeline."""

    n_channels: int = 8
    n_epochs: int = 6
    n_samples: int = 64
    num_classes: int = 2
    spatial_hidden: int = 64
    temporal_kernel: int = 31
    feat_channels: int = 20      # d: encoder output channels / signal SPD dim
    bimap_out: int = 8           # l: attention-space SPD dim
    gru_hidden: int = 64         # m: node/edge state dim
    head_dim: int = 32
    stft_window: int = 32
    stft_hop: int = 16
    tau_top: int = 3
    eps: float = 1e-4
    reeig_threshold: float = 1e-4
    temperature: float = 1.0
    beta: float = 0.3
    kappa: float = 0.1

    def __post_init__(self):
        if self.temporal_kernel > self.n_samples:
            raise InvalidInput("temporal kernel exceeds epoch length")
        if self.stft_window > self.n_samples:
            raise InvalidInput("STFT window exceeds epoch length")
        if not 1 <= self.tau_top <= self.n_channels - 1:
            raise InvalidInput(f"tau_top must be in [1, {self.n_channels - 1}]")
        if self.bimap_out > min(self.feat_channels, self.n_channels):
            raise InvalidInput("bimap output dim exceeds an input dim")
        if not 0.0 <= self.beta < 1.0:
            raise InvalidInput(f"beta must be in [0, 1), got {self.beta}")
        if not self.kappa > 0.0:
            raise InvalidInput(f"kappa must be positive, got {self.kappa}")
        if not self.temperature > 0.0:
            raise InvalidInput(f"temperature must be positive, got {self.temperature}")
        if not self.eps > 0.0 or not self.reeig_threshold > 0.0:
            raise InvalidInput("eps and reeig_threshold must be positive")

    @property
    def stft_bins(self) -> int:
        return self.stft_window // 2 + 1

    @property
    def tangent_dim(self) -> int:
        return vec_dim(self.bimap_out)


TINY_CONFIG = dict(
    n_channels=4, n_epochs=2, n_samples=16, num_classes=2, spatial_hidden=6,
    temporal_kernel=5, feat_channels=4, bimap_out=2, gru_hidden=4, head_dim=3,
    stft_window=8, stft_hop=4, tau_top=2,
)


@dataclass
class ModelParams:
    """All learnable values. ``w_q``/``w_k``/``w_v`` form the Stiefel set;
    everything else is Euclidean."""

    w_spatial: np.ndarray    # (H, 1, N, 1)
    b_spatial: np.ndarray    # (H,)
    w_temporal: np.ndarray   # (d, H, 1, k)
    b_temporal: np.ndarray   # (d,)
    node_gru: GruParams
    edge_gru: GruParams
    gnn: GnnParams
    w_q: np.ndarray          # (N, l)
    w_k: np.ndarray          # (d, l)
    w_v: np.ndarray          # (d, l)
    w_cls: np.ndarray        # (C, T*p)
    b_cls: np.ndarray        # (C,)
    w_head_g: np.ndarray     # (head, m)
    b_head_g: np.ndarray     # (head,)
    w_head_u: np.ndarray     # (head, p)
    b_head_u: np.ndarray     # (head,)

    STIEFEL = ("w_q", "w_k", "w_v")

    def named_arrays(self) -> List[Tuple[str, np.ndarray]]:
        """Every parameter as (name, array), in the fixed checkpoint order."""
        out = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, (GruParams, GnnParams)):
                for g in fields(value):
                    out.append((f"{f.name}.{g.name}", getattr(value, g.name)))
            else:
                out.append((f.name, value))
        return out

    def with_arrays(self, named: Dict[str, np.ndarray]) -> "ModelParams":
        """Rebuild with the given name -> array mapping (same fixed names)."""
        groups: Dict[str, dict] = {}
        flat = {}
        for name, arr in named.items():
            if "." in name:
                outer, inner = name.split(".", 1)
                groups.setdefault(outer, {})[inner] = arr
            else:
                flat[name] = arr
        for outer, sub in groups.items():
            flat[outer] = replace(getattr(self, outer), **sub)
        return replace(self, **flat)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Deterministic initialization; BiMap weights start on the Stiefel
    manifold via QR of a Gaussian draw."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6D6F64]))
    c = config

    def conv(shape):
        fan_in = int(np.prod(shape[1:]))
        return rng.standard_normal(shape) / np.sqrt(fan_in)

    def stiefel(d, l):
        q, r = np.linalg.qr(rng.standard_normal((d, l)))
        return q * np.where(np.diagonal(r) < 0.0, -1.0, 1.0)

    def dense(rows, cols):
        return rng.standard_normal((rows, cols)) / np.sqrt(cols)

    return ModelParams(
        w_spatial=conv((c.spatial_hidden, 1, c.n_channels, 1)),
        b_spatial=np.zeros(c.spatial_hidden),
        w_temporal=conv((c.feat_channels, c.spatial_hidden, 1, c.temporal_kernel)),
        b_temporal=np.zeros(c.feat_channels),
        node_gru=init_gru(c.stft_bins, c.gru_hidden, rng),
        edge_gru=init_gru(1, c.gru_hidden, rng),
        gnn=init_gnn(c.gru_hidden, rng),
        w_q=stiefel(c.n_channels, c.bimap_out),
        w_k=stiefel(c.feat_channels, c.bimap_out),
        w_v=stiefel(c.feat_channels, c.bimap_out),
        w_cls=np.zeros((c.num_classes, c.n_epochs * c.tangent_dim)),
        b_cls=np.zeros(c.num_classes),
        w_head_g=dense(c.head_dim, c.gru_hidden),
        b_head_g=np.zeros(c.head_dim),
        w_head_u=dense(c.head_dim, c.tangent_dim),
        b_head_u=np.zeros(c.head_dim),
    )


def prepare_graphs(trials: np.ndarray, config: ModelConfig) -> List[GraphStructure]:
    """Precompute the frozen graph structures of every trial."""
    return [
        build_graph_structure(trial, config.stft_window, config.stft_hop, config.tau_top)
        for trial in trials
    ]


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class ForwardResult:
    logits: np.ndarray        # (B, C)
    tangent: np.ndarray       # (B, T, p)
    tangent_mean: np.ndarray  # (B, p)
    graph_global: np.ndarray  # (B, m)
    attention: np.ndarray     # (B, T, T)
    spd_minima: Optional[Dict[str, float]] = None


def _wrap_params(tape: ad.Tape, params: ModelParams):
    named = {name: tape.leaf(arr) for name, arr in params.named_arrays()}
    return params.with_arrays(named), named


def _forward_graph(params, structures, config, spd_lift):
    return encode_graph_batch(params.node_gru, params.edge_gru, params.gnn,
                              structures, config.eps, spd_lift)


def _forward_core(params, trials, structures, config: ModelConfig, audit=None):
    """Shared forward computation on arrays or tape Vars.

    Returns (logits, tangent, tangent_mean, graph_global, attention_cache,
    s_seq, c_seq, reeig_out). ``audit``, if given, is fed min-eigenvalue and
    attention-row statistics of every SPD stack produced.
    """
    c = config
    batch = trials.shape[0]
    x = trials.reshape(batch * c.n_epochs, 1, c.n_channels, c.n_samples)

    h1 = ad.add(ad.conv2d(x, params.w_spatial),
                ad.expand(ad.reshape(params.b_spatial, (1, -1, 1, 1)),
                          (batch * c.n_epochs, c.spatial_hidden, 1, c.n_samples)))
    out_len = c.n_samples - c.temporal_kernel + 1
    h2 = ad.add(ad.conv2d(h1, params.w_temporal),
                ad.expand(ad.reshape(params.b_temporal, (1, -1, 1, 1)),
                          (batch * c.n_epochs, c.feat_channels, 1, out_len)))
    feats = ad.reshape(h2, (batch, c.n_epochs, c.feat_channels, out_len))
    s_seq = covariance_op(feats, c.eps)

    graph = _forward_graph(params, structures, c, spd_lift=covariance_op)
    c_seq = graph.c_seq

    modulated, cache = attention_op(params.w_q, params.w_k, params.w_v,
                                    s_seq, c_seq, c.eps, c.temperature)
    filtered = reeig_op(modulated, c.reeig_threshold)
    tangent = tangent_op(filtered)                       # (B, T, p)
    tangent_mean = ad.mean(tangent, axis=1)              # (B, p)

    flat = ad.reshape(tangent, (batch, c.n_epochs * c.tangent_dim))
    logits = ad.add(ad.matmul(flat, ad.transpose(params.w_cls)),
                    ad.expand(ad.reshape(params.b_cls, (1, -1)), (batch, c.num_classes)))

    if audit is not None:
        audit.record("signal_spd", ad._data(s_seq))
        audit.record("graph_spd", ad._data(c_seq))
        audit.record("keys", cache.keys)
        audit.record("queries", cache.queries)
        audit.record("values", cache.values)
        audit.record("modulated", cache.out)
        audit.record("reeig", ad._data(filtered))
        audit.record_rows(cache.weights)
    return logits, tangent, tangent_mean, graph.global_out, cache


def forward(params: ModelParams, trial: np.ndarray, config: ModelConfig,
            structure: Optional[GraphStructure] = None) -> ForwardResult:
    """Inference pass over one trial ``(T, N, L)`` or a batch ``(B, T, N, L)``."""
    trials = np.asarray(trial, dtype=np.float64)
    single = trials.ndim == 3
    if single:
        trials = trials[None]
    if trials.shape[1:] != (config.n_epochs, config.n_channels, config.n_samples):
        raise InvalidInput(
            f"trial shape {trials.shape[1:]} does not match config "
            f"{(config.n_epochs, config.n_channels, config.n_samples)}"
        )
    if structure is None:
        structures = prepare_graphs(trials, config)
    elif isinstance(structure, GraphStructure):
        structures = [structure]
    else:
        structures = list(structure)
    logits, tangent, tangent_mean, graph_global, cache = _forward_core(
        params, trials, structures, config
    )
    res = ForwardResult(
        logits=np.asarray(logits), tangent=np.asarray(tangent),
        tangent_mean=np.asarray(tangent_mean), graph_global=np.asarray(graph_global),
        attention=np.asarray(cache.weights),
    )
    if single:
        res = ForwardResult(logits=res.logits[0], tangent=res.tangent[0],
                            tangent_mean=res.tangent_mean[0],
                            graph_global=res.graph_global[0],
                            attention=res.attention[0])
    return res


def encode_trial(params: ModelParams, trial: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Signal-view SPD sequence of one trial: spatial conv, temporal conv,
    per-epoch feature covariance plus ``eps * I``."""
    trial = np.asarray(trial, dtype=np.float64)
    if trial.shape != (config.n_epochs, config.n_channels, config.n_samples):
        raise InvalidInput(
            f"trial shape {trial.shape} does not match config "
            f"{(config.n_epochs, config.n_channels, config.n_samples)}"
        )
    c = config
    x = trial.reshape(c.n_epochs, 1, c.n_channels, c.n_samples)
    h1 = ad.conv2d(x, params.w_spatial) + params.b_spatial.reshape(1, -1, 1, 1)
    h2 = ad.conv2d(h1, params.w_temporal) + params.b_temporal.reshape(1, -1, 1, 1)
    feats = h2.reshape(c.n_epochs, c.feat_channels, -1)
    return covariance_op(feats, c.eps)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits, label: int) -> float:
    """``-log softmax(logits)[label]``, stabilized by max subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise InvalidInput(f"logits must be 1-d, got shape {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise InvalidInput("logits contain non-finite entries")
    if not 0 <= label < logits.shape[0]:
        raise InvalidInput(f"label {label} out of range [0, {logits.shape[0]})")
    shifted = logits - logits.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[label])


@dataclass(frozen=True)
class ProjectionHead:
    """Affine maps taking the graph and tangent views into one alignment
    space (the input widths differ, so the maps are per-view)."""

    w_g: np.ndarray
    b_g: np.ndarray
    w_u: np.ndarray
    b_u: np.ndarray


def geotop_loss(g_batch, u_batch, head: ProjectionHead, kappa: float) -> float:
    """Contrastive alignment of pooled tangent embeddings with global graph
    features: each projected graph feature must be most similar (cosine, with
    temperature ``kappa``) to its own trial's projected tangent embedding,
    against the rest of the batch."""
    if not kappa > 0.0:
        raise InvalidInput(f"kappa must be positive, got {kappa}")
    g_batch = np.asarray(g_batch, dtype=np.float64)
    u_batch = np.asarray(u_batch, dtype=np.float64)
    if g_batch.ndim != 2 or u_batch.ndim != 2 or g_batch.shape[0] != u_batch.shape[0]:
        raise InvalidInput("g_batch and u_batch must be (B, .) with equal batch")
    if g_batch.shape[0] < 1:
        raise InvalidInput("batch must be nonempty")
    z_g = row_normalize_op(g_batch @ head.w_g.T + head.b_g)
    z_u = row_normalize_op(u_batch @ head.w_u.T + head.b_u)
    sim = z_g @ z_u.T / kappa
    shifted = sim - sim.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return float(-np.mean(np.diagonal(log_probs)))


def total_loss(ce: float, geotop: float, beta: float) -> float:
    """Weighted sum ``ce + beta * geotop`` with ``beta`` in [0, 1)."""
    if not 0.0 <= beta < 1.0:
        raise InvalidInput(f"beta must be in [0, 1), got {beta}")
    return float(ce + beta * geotop)


def _geotop_on_tape(params, graph_global, tangent_mean, kappa: float, batch: int):
    z_g = row_normalize_op(_affine_rows(graph_global, params.w_head_g, params.b_head_g))
    z_u = row_normalize_op(_affine_rows(tangent_mean, params.w_head_u, params.b_head_u))
    sim = ad.mul(ad.matmul(z_g, ad.transpose(z_u)), 1.0 / kappa)
    log_probs = ad.log_softmax(sim)
    mask = np.eye(batch)
    return ad.neg(ad.div(ad.sum_(ad.mul(log_probs, mask)), float(batch)))


def _affine_rows(x, w, b):
    pre = ad.matmul(x, ad.transpose(w))
    return ad.add(pre, ad.expand(ad.reshape(b, (1, -1)), pre.shape))


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    auroc: float
    f1: float

    def as_dict(self):
        return {"accuracy": self.accuracy, "auroc": self.auroc, "f1": self.f1}


def _auroc_binary(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-statistic AUROC with the ties-count-half convention."""
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        warnings.warn("AUROC undefined for a single-class set", MetricsWarning, stacklevel=3)
        return float("nan")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum = ranks[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _f1_binary(pred: np.ndarray, labels: np.ndarray, positive: int = 1) -> float:
    tp = int(np.sum((pred == positive) & (labels == positive)))
    fp = int(np.sum((pred == positive) & (labels != positive)))
    fn = int(np.sum((pred != positive) & (labels == positive)))
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2.0 * tp / denom


def compute_metrics(scores: np.ndarray, labels: np.ndarray) -> Metrics:
    """Accuracy by argmax, AUROC by rank statistic (one-vs-rest macro when
    multiclass), F1 for the positive class (macro when multiclass)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise InvalidInput("scores must be (B, C) aligned with labels")
    pred = np.argmax(scores, axis=1)
    accuracy = float(np.mean(pred == labels))
    n_classes = scores.shape[1]
    if n_classes == 2:
        auroc = _auroc_binary(scores[:, 1], labels)
        f1 = _f1_binary(pred, labels)
    else:
        aurocs, f1s = [], []
        for k in range(n_classes):
            aurocs.append(_auroc_binary(scores[:, k], (labels == k).astype(int)))
            f1s.append(_f1_binary((pred == k).astype(int), (labels == k).astype(int)))
        auroc = float(np.nanmean(aurocs)) if not all(map(math.isnan, aurocs)) else float("nan")
        f1 = float(np.mean(f1s))
    return Metrics(accuracy=accuracy, auroc=auroc, f1=f1)


def evaluate(params: ModelParams, trials: np.ndarray, labels: np.ndarray,
             config: ModelConfig,
             structures: Optional[Sequence[GraphStructure]] = None) -> Metrics:
    """Metrics of the model on a dataset split (softmax scores by argmax)."""
    trials = np.asarray(trials, dtype=np.float64)
    if trials.shape[0] == 0:
        raise InvalidInput("dataset is empty")
    if structures is None:
        structures = prepare_graphs(trials, config)
    res = forward(params, trials, config, structure=structures)
    logits = res.logits
    shifted = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=-1, keepdims=True)
    return compute_metrics(probs, labels)


# ---------------------------------------------------------------------------
# training


@dataclass
class StepInfo:
    loss: float
    ce: float
    geotop: float


@dataclass
class LossParts:
    loss: object
    ce: object
    geotop: object


def _loss_core(params, trials, labels, structures, config: ModelConfig, audit=None):
    """Batch-mean training loss; works on arrays or tape Vars."""
    batch = trials.shape[0]
    logits, tangent, tangent_mean, graph_global, cache = _forward_core(
        params, trials, structures, config, audit=audit
    )
    ce = cross_entropy_op(logits, labels)
    if config.beta > 0.0:
        geotop = _geotop_on_tape(params, graph_global, tangent_mean, config.kappa, batch)
        loss = ad.add(ce, ad.mul(geotop, config.beta))
    else:
        geotop = 0.0
        loss = ce
    return LossParts(loss=loss, ce=ce, geotop=geotop)


def batch_loss(params: ModelParams, trials, labels,
               structures: Sequence[GraphStructure], config: ModelConfig) -> float:
    """Scalar batch-mean loss, evaluated without a tape."""
    parts = _loss_core(params, np.asarray(trials, dtype=np.float64),
                       labels, structures, config)
    return float(parts.loss)


def loss_and_grads(params: ModelParams, trials, labels,
                   structures: Sequence[GraphStructure], config: ModelConfig,
                   audit: Optional["SpdAudit"] = None
                   ) -> Tuple[StepInfo, Dict[str, np.ndarray]]:
    """Batch-mean loss and its gradient for every named parameter."""
    tape = ad.Tape()
    tracked, named_vars = _wrap_params(tape, params)
    parts = _loss_core(tracked, np.asarray(trials, dtype=np.float64),
                       labels, structures, config, audit=audit)
    loss_val = float(parts.loss.data)
    ce_val = float(ad._data(parts.ce))
    geo_val = float(ad._data(parts.geotop)) if config.beta > 0.0 else 0.0
    if not np.isfinite(loss_val):
        component = "cross-entropy" if not np.isfinite(ce_val) else "alignment loss"
        raise NumericalFailure(
            f"non-finite training loss: {component} is not finite "
            f"(ce={ce_val!r}, geotop={geo_val!r})"
        )
    grads = ad.backward(tape, parts.loss)
    named = {name: grads.wrt(var) for name, var in named_vars.items()}
    return StepInfo(loss=loss_val, ce=ce_val, geotop=geo_val), named


class SpdAudit:
    """Collects min-eigenvalue and attention-row-sum statistics of every SPD
    stack produced during training (supports the closure acceptance check)."""

    def __init__(self):
        self.min_eigs: Dict[str, float] = {}
        self.worst_row_gap: float = 0.0
        self.count = 0

    def record(self, name: str, stack: np.ndarray):
        low = float(np.min(min_eigenvalue(stack)))
        prev = self.min_eigs.get(name)
        self.min_eigs[name] = low if prev is None else min(prev, low)
        self.count += 1

    def record_rows(self, weights: np.ndarray):
        gap = float(np.max(np.abs(weights.sum(axis=-1) - 1.0)))
        self.worst_row_gap = max(self.worst_row_gap, gap)


class Trainer:
    """Alternating optimizer: Adam on the Euclidean parameter set, projected
    gradient with QR retraction on the Stiefel set (the BiMap weights).

    With ``meta_optimizer=False`` the Stiefel set receives raw Adam updates
    and no retraction, so orthogonality drifts (the ablation mode).
    """

    def __init__(self, config: ModelConfig, params: Optional[ModelParams] = None,
                 seed: int = 0, lr: float = 1e-3, meta_optimizer: bool = True,
                 beta1: float = 0.9, beta2: float = 0.999, adam_eps: float = 1e-8):
        if not lr >= 0.0:
            raise InvalidInput(f"lr must be nonnegative, got {lr}")
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        self.lr = lr
        self.meta_optimizer = meta_optimizer
        self.beta1, self.beta2, self.adam_eps = beta1, beta2, adam_eps
        self._adam_m: Dict[str, np.ndarray] = {}
        self._adam_v: Dict[str, np.ndarray] = {}
        self._adam_t = 0
        self._shuffle_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x736866]))

    def meta_step(self, trials: np.ndarray, labels: np.ndarray,
                  structures: Sequence[GraphStructure],
                  audit: Optional[SpdAudit] = None) -> StepInfo:
        """One forward/backward on the batch-mean loss and one parameter
        update of both groups."""
        info, grads = loss_and_grads(self.params, trials, labels, structures,
                                     self.config, audit=audit)
        if self.lr > 0.0:
            self._apply_updates(grads)
        return info

    def _apply_updates(self, grads: Dict[str, np.ndarray]):
        stiefel = set(ModelParams.STIEFEL)
        updated: Dict[str, np.ndarray] = {}
        self._adam_t += 1
        t = self._adam_t
        for name, arr in self.params.named_arrays():
            g = grads[name]
            if self.meta_optimizer and name in stiefel:
                updated[name] = stiefel_retract(arr, g, self.lr).matrix
                continue
            m = self._adam_m.get(name)
            v = self._adam_v.get(name)
            if m is None:
                m = np.zeros_like(arr)
                v = np.zeros_like(arr)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self._adam_m[name] = m
            self._adam_v[name] = v
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            updated[name] = arr - self.lr * m_hat / (np.sqrt(v_hat) + self.adam_eps)
        self.params = self.params.with_arrays(updated)

    def train(self, trials: np.ndarray, labels: np.ndarray,
              structures: Sequence[GraphStructure], epochs: int, batch_size: int,
              audit: Optional[SpdAudit] = None,
              on_epoch: Optional[Callable[[int, "Trainer", float], None]] = None
              ) -> List[StepInfo]:
        """Seeded-shuffle minibatch loop; batch size is capped at the split
        size. ``on_epoch(epoch_index, trainer, mean_loss)`` runs after each
        epoch and may raise StopIteration to end training early."""
        n = trials.shape[0]
        if n == 0:
            raise InvalidInput("training split is empty")
        bs = min(batch_size, n)
        history: List[StepInfo] = []
        for epoch in range(epochs):
            order = self._shuffle_rng.permutation(n)
            losses = []
            for start in range(0, n, bs):
                idx = order[start : start + bs]
                info = self.meta_step(trials[idx], labels[idx],
                                      [structures[i] for i in idx], audit=audit)
                history.append(info)
                losses.append(info.loss)
            if on_epoch is not None:
                try:
                    on_epoch(epoch, self, float(np.mean(losses)))
                except StopIteration:
                    return history
        return history

    def orthogonality_report(self) -> Dict[str, float]:
        return {name: orthogonality_drift(getattr(self.params, name))
                for name in ModelParams.STIEFEL}
