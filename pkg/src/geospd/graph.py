"""Dynamic-graph encoding of multichannel trials.

Pipeline: per-epoch log-spectral features (STFT), cosine adjacency with
top-k sparsification, GRU encoding of node and edge attribute sequences
(time-then-graph: sequences first, one graph pass after), a single
message-passing round, and a Gram-matrix lift of per-epoch node states to an
SPD sequence.

Graph structures (features, adjacency, kept edges) are computed once from
the raw signals and stay fixed during training; only the GRU/GNN parameters
are learned. Edge states are computed for the union of edges kept at any
epoch; pruned pairs never run a GRU.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import InvalidInput, NumericsWarning
from .spd import covariance_spd


@dataclass(frozen=True)
class SpectralFeatures:
    """Non-negative log-spectral magnitudes, one vector per channel and epoch."""

    values: np.ndarray  # (N, T, F)
    window: int
    hop: int

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def epochs(self) -> int:
        return self.values.shape[1]

    @property
    def bins(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class GruParams:
    """Gate weights of a standard GRU cell (update z, reset r, candidate h)."""

    w_z: np.ndarray
    w_r: np.ndarray
    w_h: np.ndarray
    u_z: np.ndarray
    u_r: np.ndarray
    u_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    @property
    def hidden_dim(self) -> int:
        return self.b_z.shape[0] if hasattr(self.b_z, "shape") else self.b_z.data.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_z.shape[1] if hasattr(self.w_z, "shape") else self.w_z.data.shape[1]


@dataclass(frozen=True)
class GnnParams:
    """Affine maps of the message round: edge gate (m -> m) and node update
    ((2m) -> m), each followed by a ReLU."""

    w_edge: np.ndarray
    b_edge: np.ndarray
    w_node: np.ndarray
    b_node: np.ndarray


@dataclass(frozen=True)
class DynamicGraphSequence:
    """Per-trial graph view: sparsified adjacency per epoch plus node/edge
    state sequences and the aggregated outputs."""

    adjacency: np.ndarray    # (T, N, N), symmetric, zero diagonal
    node_embed: np.ndarray   # (N, T, m)
    edge_embed: np.ndarray   # (N, N, T, m); zero where the pair was never kept
    node_out: np.ndarray     # (N, m)
    global_out: np.ndarray   # (m,)


@dataclass(frozen=True)
class GraphStructure:
    """Frozen (non-learned) graph inputs of one trial."""

    features: np.ndarray      # (N, T, F) log-spectra
    adjacency: np.ndarray     # (T, N, N) sparsified similarities
    pairs: np.ndarray         # (P, 2) union of kept undirected edges, i < j
    pair_weights: np.ndarray  # (P,) mean over epochs of the sparsified weight
    pair_inputs: np.ndarray   # (P, T) sparsified weight per epoch (edge GRU input)


def init_gru(input_dim: int, hidden_dim: int, rng: np.random.Generator) -> GruParams:
    scale_in = 1.0 / np.sqrt(input_dim)
    scale_h = 1.0 / np.sqrt(hidden_dim)
    def w():
        return rng.standard_normal((hidden_dim, input_dim)) * scale_in
    def u():
        return rng.standard_normal((hidden_dim, hidden_dim)) * scale_h
    zeros = lambda: np.zeros(hidden_dim)
    return GruParams(w_z=w(), w_r=w(), w_h=w(), u_z=u(), u_r=u(), u_h=u(),
                     b_z=zeros(), b_r=zeros(), b_h=zeros())


def init_gnn(hidden_dim: int, rng: np.random.Generator) -> GnnParams:
    scale = 1.0 / np.sqrt(hidden_dim)
    return GnnParams(
        w_edge=rng.standard_normal((hidden_dim, hidden_dim)) * scale,
        b_edge=np.zeros(hidden_dim),
        w_node=rng.standard_normal((hidden_dim, 2 * hidden_dim)) * scale / np.sqrt(2.0),
        b_node=np.zeros(hidden_dim),
    )


# ---------------------------------------------------------------------------
# spectral features and adjacency


def stft_features(trial, window: int, hop: int, taper: str = "hann") -> SpectralFeatures:
    """Log-magnitude spectra per channel and epoch.

    Frames of ``window`` samples (stepped by ``hop``) are tapered, transformed
    with a real FFT, magnitude-averaged over frames, and compressed with
    ``log(1 + m)``, giving ``window // 2 + 1`` non-negative bins.
    """
    trial = np.asarray(trial, dtype=np.float64)
    if trial.ndim != 3:
        raise InvalidInput(f"trial must be (T, N, L), got shape {trial.shape}")
    n_samples = trial.shape[-1]
    if window > n_samples:
        raise InvalidInput(f"window {window} exceeds epoch length {n_samples}")
    if window < 2 or hop < 1:
        raise InvalidInput(f"bad STFT geometry: window {window}, hop {hop}")
    if not np.all(np.isfinite(trial)):
        raise InvalidInput("trial contains non-finite entries")
    if taper == "hann":
        win = np.hanning(window)
    elif taper == "boxcar":
        win = np.ones(window)
    else:
        raise InvalidInput(f"unknown taper {taper!r}")
    frames = np.lib.stride_tricks.sliding_window_view(trial, window, axis=-1)[..., ::hop, :]
    mags = np.abs(np.fft.rfft(frames * win, axis=-1))
    values = np.log1p(mags.mean(axis=-2))           # (T, N, F)
    return SpectralFeatures(values=np.ascontiguousarray(values.transpose(1, 0, 2)),
                            window=window, hop=hop)


def build_adjacency(spec: SpectralFeatures, t: int, tau_top: int) -> np.ndarray:
    """Cosine-similarity adjacency of epoch ``t``, keeping each row's
    ``tau_top`` largest off-diagonal entries and symmetrizing by union."""
    n = spec.channels
    if not 1 <= tau_top <= n - 1:
        raise InvalidInput(f"tau_top must be in [1, {n - 1}], got {tau_top}")
    if not 0 <= t < spec.epochs:
        raise InvalidInput(f"epoch index {t} out of range [0, {spec.epochs})")
    x = spec.values[:, t, :]
    norms = np.linalg.norm(x, axis=1)
    dead = norms == 0.0
    if np.any(dead):
        warnings.warn(
            f"{int(dead.sum())} channel(s) have zero spectral norm at epoch {t}; "
            "their similarities are set to 0",
            NumericsWarning,
            stacklevel=2,
        )
    safe = np.where(dead, 1.0, norms)
    sim = (x @ x.T) / np.outer(safe, safe)
    sim[dead, :] = 0.0
    sim[:, dead] = 0.0
    sim = np.clip(sim, -1.0, 1.0)
    np.fill_diagonal(sim, 0.0)

    keep = np.zeros((n, n), dtype=bool)
    for i in range(n):
        candidates = np.argsort(-sim[i], kind="stable")
        picked = [j for j in candidates if j != i][:tau_top]
        keep[i, picked] = True
    keep |= keep.T
    out = np.where(keep, sim, 0.0)
    np.fill_diagonal(out, 0.0)
    return out


def build_graph_structure(trial, window: int, hop: int, tau_top: int,
                          taper: str = "hann") -> GraphStructure:
    """Precompute the frozen graph inputs of one trial."""
    spec = stft_features(trial, window, hop, taper)
    n, T = spec.channels, spec.epochs
    adjacency = np.stack([build_adjacency(spec, t, tau_top) for t in range(T)])
    union = np.any(adjacency != 0.0, axis=0)
    rows, cols = np.nonzero(np.triu(union, k=1))
    pairs = np.stack([rows, cols], axis=1) if rows.size else np.zeros((0, 2), dtype=int)
    pair_inputs = adjacency[:, rows, cols].T if rows.size else np.zeros((0, T))
    pair_weights = pair_inputs.mean(axis=1) if rows.size else np.zeros(0)
    return GraphStructure(features=spec.values, adjacency=adjacency, pairs=pairs,
                          pair_weights=pair_weights, pair_inputs=pair_inputs)


# ---------------------------------------------------------------------------
# recurrent and graph aggregation operators


def _gru_step(params: GruParams, x, h):
    """One GRU step on row-stacked states; works on arrays or tape Vars."""
    z = ad.sigmoid(_affine_pair(x, params.w_z, h, params.u_z, params.b_z))
    r = ad.sigmoid(_affine_pair(x, params.w_r, h, params.u_r, params.b_r))
    cand = ad.tanh(_affine_pair(x, params.w_h, ad.mul(r, h), params.u_h, params.b_h))
    return ad.add(ad.sub(h, ad.mul(z, h)), ad.mul(z, cand))


def _affine_pair(x, w, h, u, b):
    pre = ad.add(ad.matmul(x, ad.transpose(w)), ad.matmul(h, ad.transpose(u)))
    bias = ad.expand(ad.reshape(b, (1, -1)), pre.shape)
    return ad.add(pre, bias)


def gru_sequence(params: GruParams, inputs):
    """Run a GRU over ``(T, input_dim)`` inputs from a zero initial state.

    Returns ``(final_hidden (m,), hiddens (T, m))``; an empty sequence yields
    the zero state.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2:
        raise InvalidInput(f"inputs must be (T, input_dim), got {inputs.shape}")
    m = params.b_z.shape[0]
    if inputs.shape[0] and inputs.shape[1] != params.w_z.shape[1]:
        raise InvalidInput(
            f"input dim {inputs.shape[1]} does not match GRU input dim {params.w_z.shape[1]}"
        )
    h = np.zeros((1, m))
    hiddens = np.zeros((inputs.shape[0], m))
    for t in range(inputs.shape[0]):
        h = _gru_step(params, inputs[t : t + 1], h)
        hiddens[t] = h[0]
    return h[0], hiddens


def gnn_aggregate(node_hidden, edge_hidden, adjacency, params: GnnParams):
    """One message-passing round over the kept edges.

    ``message(i<-j) = relu(W_e h^e_ij + b_e) * h^n_j`` for edges with nonzero
    adjacency; node i updates to ``relu(W_n [h^n_i ; sum_j A_ij message] + b_n)``
    and the global feature is the mean over nodes.
    """
    node_hidden = np.asarray(node_hidden, dtype=np.float64)
    edge_hidden = np.asarray(edge_hidden, dtype=np.float64)
    adjacency = np.asarray(adjacency, dtype=np.float64)
    n, m = node_hidden.shape
    if edge_hidden.shape != (n, n, m):
        raise InvalidInput(f"edge hiddens must be {(n, n, m)}, got {edge_hidden.shape}")
    if adjacency.shape != (n, n):
        raise InvalidInput(f"adjacency must be {(n, n)}, got {adjacency.shape}")
    gates = np.maximum(edge_hidden @ params.w_edge.T + params.b_edge, 0.0)
    messages = gates * node_hidden[None, :, :]      # (i, j, m), message j -> i
    agg = np.einsum("ij,ijm->im", adjacency, messages)
    stacked = np.concatenate([node_hidden, agg], axis=1)
    node_out = np.maximum(stacked @ params.w_node.T + params.b_node, 0.0)
    return node_out, node_out.mean(axis=0)


def graph_spd(node_hidden, eps: float) -> np.ndarray:
    """Lift per-node states ``(..., N, m)`` to an SPD matrix: the Gram matrix
    of row-centered states over the feature axis, plus ``eps * I``."""
    node_hidden = np.asarray(node_hidden, dtype=np.float64)
    if node_hidden.ndim < 2 or node_hidden.shape[-1] < 1:
        raise InvalidInput(f"node states must be (..., N, m), got {node_hidden.shape}")
    return covariance_spd(node_hidden, eps)


# ---------------------------------------------------------------------------
# batched trial encoding (arrays or tape Vars for the parameters)


class GraphEncoding(NamedTuple):
    c_seq: object      # (B, T, N, N)
    node_out: object   # (B*N, m) row-stacked
    global_out: object  # (B, m)


def encode_graph_batch(node_gru: GruParams, edge_gru: GruParams, gnn: GnnParams,
                       structures: Sequence[GraphStructure], eps: float,
                       spd_lift) -> GraphEncoding:
    """Encode a batch of trials with shared parameters.

    ``spd_lift(states, eps)`` lifts ``(B, N, m)`` per-epoch states to
    ``(B, N, N)`` SPD matrices (a tape op during training, plain numpy
    otherwise). Node and edge GRUs run row-stacked across the whole batch;
    messages flow along each trial's kept edges only, reduced in fixed edge
    order.
    """
    batch = len(structures)
    if batch == 0:
        raise InvalidInput("empty batch")
    n, T, F = structures[0].features.shape
    m = node_gru.b_z.shape[0] if hasattr(node_gru.b_z, "shape") else node_gru.b_z.data.shape[0]

    node_inputs = np.stack([s.features for s in structures])       # (B, N, T, F)
    pair_counts = [s.pairs.shape[0] for s in structures]
    total_pairs = int(np.sum(pair_counts))
    if total_pairs:
        edge_inputs = np.concatenate([s.pair_inputs for s in structures])  # (P_tot, T)
    else:
        edge_inputs = np.zeros((0, T))

    # Node GRU over all trials and channels at once.
    h_node = np.zeros((batch * n, m))
    per_epoch_states = []
    for t in range(T):
        x_t = node_inputs[:, :, t, :].reshape(batch * n, F)
        h_node = _gru_step(node_gru, x_t, h_node)
        per_epoch_states.append(h_node)

    # Edge GRU over the union edges of every trial.
    h_edge = np.zeros((max(total_pairs, 1), m))
    if total_pairs:
        for t in range(T):
            h_edge = _gru_step(edge_gru, edge_inputs[:, t : t + 1], h_edge)

    # Per-epoch SPD lift of the node states.
    c_per_epoch = []
    for t in range(T):
        states = ad.reshape(per_epoch_states[t], (batch, n, m))
        c_t = spd_lift(states, eps)
        c_per_epoch.append(ad.reshape(c_t, (batch, 1, n, n)))
    c_seq = ad.concat(c_per_epoch, axis=1)

    # One message round along kept edges (both directions per kept pair).
    h_final = per_epoch_states[-1]
    offsets = np.cumsum([0] + pair_counts)
    dst, src, pair_idx, weights = [], [], [], []
    for b, s in enumerate(structures):
        base = b * n
        for p, (i, j) in enumerate(s.pairs):
            w = s.pair_weights[p]
            dst += [base + i, base + j]
            src += [base + j, base + i]
            pair_idx += [offsets[b] + p, offsets[b] + p]
            weights += [w, w]
    if total_pairs:
        gates = ad.relu(_affine(h_edge, gnn.w_edge, gnn.b_edge))
        gate_rows = ad.gather_rows(gates, np.asarray(pair_idx))
        src_rows = ad.gather_rows(h_final, np.asarray(src))
        wcol = np.asarray(weights)[:, None]
        msgs = ad.mul(ad.mul(gate_rows, src_rows), ad.expand(wcol, gate_rows.shape))
        agg = ad.segment_sum(msgs, np.asarray(dst), batch * n)
    else:
        agg = ad.mul(h_final, 0.0)
    node_out = ad.relu(_affine(ad.concat([h_final, agg], axis=1), gnn.w_node, gnn.b_node))
    global_out = ad.mean(ad.reshape(node_out, (batch, n, m)), axis=1)
    return GraphEncoding(c_seq=c_seq, node_out=node_out, global_out=global_out)


def _affine(x, w, b):
    pre = ad.matmul(x, ad.transpose(w))
    return ad.add(pre, ad.expand(ad.reshape(b, (1, -1)), pre.shape))


class GraphGrads(NamedTuple):
    node_gru: GruParams
    edge_gru: GruParams
    gnn: GnnParams


def graph_backward(node_gru: GruParams, edge_gru: GruParams, gnn: GnnParams,
                   structure: GraphStructure, eps: float,
                   upstream_c, upstream_u, upstream_g) -> GraphGrads:
    """Exact reverse-mode gradients of the graph encoder's parameters given
    upstream gradients on the SPD sequence, node outputs, and global feature.

    The adjacency is a frozen input (the top-k selection is not
    differentiated), so only GRU/GNN parameters receive gradients. Implemented
    by replaying the forward on a tape and seeding with the linear pairing
    ``<upstream_c, C> + <upstream_u, u> + <upstream_g, g>``.
    """
    from dataclasses import fields as dc_fields, replace
    from .nodes import covariance_op

    tape = ad.Tape()

    def wrap(obj):
        return replace(obj, **{f.name: tape.leaf(getattr(obj, f.name))
                               for f in dc_fields(obj)})

    node_v, edge_v, gnn_v = wrap(node_gru), wrap(edge_gru), wrap(gnn)
    enc = encode_graph_batch(node_v, edge_v, gnn_v, [structure], eps,
                             spd_lift=covariance_op)
    up_c = np.asarray(upstream_c, dtype=np.float64)[None]
    up_u = np.asarray(upstream_u, dtype=np.float64)
    up_g = np.asarray(upstream_g, dtype=np.float64)[None]
    seed = ad.add(
        ad.add(ad.sum_(ad.mul(enc.c_seq, up_c)), ad.sum_(ad.mul(enc.node_out, up_u))),
        ad.sum_(ad.mul(enc.global_out, up_g)),
    )
    grads = ad.backward(tape, seed)

    def unwrap(obj_v, template):
        return replace(template, **{f.name: grads.wrt(getattr(obj_v, f.name))
                                    for f in dc_fields(template)})

    return GraphGrads(
        node_gru=unwrap(node_v, node_gru),
        edge_gru=unwrap(edge_v, edge_gru),
        gnn=unwrap(gnn_v, gnn),
    )


def encode_graph(node_gru: GruParams, edge_gru: GruParams, gnn: GnnParams,
                 structure: GraphStructure, eps: float) -> DynamicGraphSequence:
    """Single-trial contract view of the batched encoder, with the edge state
    tensor densified (zeros for never-kept pairs)."""
    enc = encode_graph_batch(node_gru, edge_gru, gnn, [structure], eps,
                             spd_lift=lambda h, e: graph_spd(h, e))
    n, T, _ = structure.features.shape
    m = node_gru.b_z.shape[0]
    node_embed = np.zeros((n, T, m))
    for i in range(n):
        _, hid = gru_sequence(node_gru, structure.features[i])
        node_embed[i] = hid
    edge_embed = np.zeros((n, n, T, m))
    for p, (i, j) in enumerate(structure.pairs):
        _, hid = gru_sequence(edge_gru, structure.pair_inputs[p][:, None])
        edge_embed[i, j] = hid
        edge_embed[j, i] = hid
    return DynamicGraphSequence(
        adjacency=structure.adjacency,
        node_embed=node_embed,
        edge_embed=edge_embed,
        node_out=np.asarray(enc.node_out),
        global_out=np.asarray(enc.global_out).reshape(-1),
    )
