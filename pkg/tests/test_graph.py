"""Spectral features, adjacency, GRU/GNN encoders, graph SPD lift."""

import numpy as np
import pytest

from geospd.errors import InvalidInput, NumericsWarning
from geospd import graph
from geospd.gradcheck import check_graph
from geospd.spd import min_eigenvalue

import oracles


def make_features(values):
    values = np.asarray(values, dtype=np.float64)
    return graph.SpectralFeatures(values=values, window=8, hop=4)


class TestStftFeatures:
    def test_zero_signal(self):
        spec = graph.stft_features(np.zeros((2, 3, 32)), window=8, hop=4)
        np.testing.assert_array_equal(spec.values, 0.0)
        assert spec.bins == 5

    def test_exact_bin_sinusoid_concentrates(self):
        # Full-epoch rectangular window, frequency on bin 4 exactly.
        L, fs = 64, 64.0
        t = np.arange(L) / fs
        sig = np.sin(2.0 * np.pi * 4.0 * t)
        trial = np.tile(sig, (1, 1, 1))
        spec = graph.stft_features(trial, window=L, hop=L, taper="boxcar")
        mags = np.expm1(spec.values[0, 0])
        peak = mags[4]
        others = np.delete(mags, 4)
        assert peak / max(others.max(), 1e-12) >= 10.0

    def test_matches_naive_dft_oracle(self):
        rng = np.random.default_rng(0)
        trial = rng.standard_normal((2, 2, 20))
        window, hop = 8, 3
        spec = graph.stft_features(trial, window=window, hop=hop)
        win = np.hanning(window)
        for n in range(2):
            for t in range(2):
                frames = [trial[t, n, s : s + window] * win
                          for s in range(0, 20 - window + 1, hop)]
                mags = np.mean([oracles.naive_dft_magnitude(f) for f in frames], axis=0)
                np.testing.assert_allclose(spec.values[n, t], np.log1p(mags), atol=1e-9)

    def test_window_validation(self):
        with pytest.raises(InvalidInput):
            graph.stft_features(np.zeros((1, 1, 8)), window=16, hop=4)


class TestBuildAdjacency:
    def test_identical_spectra(self):
        # Every similarity that survives sparsification equals 1.0.
        spec = make_features(np.tile([[1.0, 2.0, 3.0]], (4, 1, 1)))
        adj = graph.build_adjacency(spec, 0, tau_top=2)
        kept = adj[adj != 0.0]
        assert kept.size >= 2 * 4  # each row picked tau_top
        np.testing.assert_allclose(kept, 1.0, atol=1e-12)
        np.testing.assert_array_equal(np.diagonal(adj), 0.0)

    def test_orthogonal_spectra(self):
        spec = make_features(np.eye(3)[:, None, :])
        adj = graph.build_adjacency(spec, 0, tau_top=1)
        np.testing.assert_array_equal(adj, np.zeros((3, 3)))

    def test_matches_brute_force_topk(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            values = rng.standard_normal((6, 1, 5))
            spec = make_features(values)
            adj = graph.build_adjacency(spec, 0, tau_top=3)
            expected = oracles.cosine_topk_adjacency(list(values[:, 0, :]), 3)
            np.testing.assert_allclose(adj, expected, atol=1e-12)

    def test_zero_norm_channel_warns(self):
        values = np.ones((3, 1, 4))
        values[1] = 0.0
        spec = make_features(values)
        with pytest.warns(NumericsWarning):
            adj = graph.build_adjacency(spec, 0, tau_top=1)
        np.testing.assert_array_equal(adj[1], 0.0)
        np.testing.assert_array_equal(adj[:, 1], 0.0)

    def test_sparsity_bound(self):
        # Each row contributes at most tau_top picks, so the union holds at
        # most 2 * N * tau_top nonzero entries overall (the per-row degree
        # can exceed 2 * tau_top when one node is picked by many others).
        rng = np.random.default_rng(2)
        values = rng.standard_normal((8, 1, 6))
        for tau in (1, 2, 3):
            adj = graph.build_adjacency(make_features(values), 0, tau_top=tau)
            assert (adj != 0.0).sum() <= 2 * 8 * tau
            np.testing.assert_array_equal(adj, adj.T)

    def test_tau_range(self):
        spec = make_features(np.ones((3, 1, 4)))
        with pytest.raises(InvalidInput):
            graph.build_adjacency(spec, 0, tau_top=3)

    def test_scale_ordering_preserved(self):
        # Cosine over log-compressed spectra is not exactly scale invariant,
        # but on structured spectra (clear per-group dominant bins, top-k
        # margins wide) a global pre-log magnitude scaling preserves each
        # row's kept set.
        rng = np.random.default_rng(3)
        mags = 0.05 * rng.random((6, 1, 8)) + 0.1
        mags[:3, 0, :4] += 5.0   # group one: low bins dominate
        mags[3:, 0, 4:] += 5.0   # group two: high bins dominate
        for c in (2.0, 7.5):
            a = make_features(np.log1p(mags))
            b = make_features(np.log1p(c * mags))
            for tau in (1, 2):
                adj_a = graph.build_adjacency(a, 0, tau)
                adj_b = graph.build_adjacency(b, 0, tau)
                for i in range(6):
                    top_a = set(np.argsort(-adj_a[i], kind="stable")[:tau])
                    top_b = set(np.argsort(-adj_b[i], kind="stable")[:tau])
                    assert top_a == top_b


class TestGruSequence:
    def test_zero_everything(self):
        m = 3
        zeros = graph.GruParams(*(np.zeros((m, 2)) for _ in range(3)),
                                *(np.zeros((m, m)) for _ in range(3)),
                                *(np.zeros(m) for _ in range(3)))
        final, hiddens = graph.gru_sequence(zeros, np.zeros((4, 2)))
        np.testing.assert_array_equal(final, np.zeros(m))
        np.testing.assert_array_equal(hiddens, np.zeros((4, m)))

    def test_empty_sequence(self):
        rng = np.random.default_rng(4)
        params = graph.init_gru(2, 3, rng)
        final, hiddens = graph.gru_sequence(params, np.zeros((0, 2)))
        np.testing.assert_array_equal(final, np.zeros(3))
        assert hiddens.shape == (0, 3)

    def test_matches_reference_recursion(self):
        rng = np.random.default_rng(5)
        params = graph.init_gru(4, 6, rng)
        inputs = rng.standard_normal((3, 4))
        final, hiddens = graph.gru_sequence(params, inputs)
        ref_final, ref_hiddens = oracles.reference_gru(
            params.w_z, params.w_r, params.w_h, params.u_z, params.u_r, params.u_h,
            params.b_z, params.b_r, params.b_h, inputs)
        np.testing.assert_allclose(final, ref_final, atol=1e-12)
        np.testing.assert_allclose(hiddens, ref_hiddens, atol=1e-12)

    def test_input_dim_mismatch(self):
        rng = np.random.default_rng(6)
        params = graph.init_gru(4, 6, rng)
        with pytest.raises(InvalidInput):
            graph.gru_sequence(params, np.zeros((2, 3)))


class TestGnnAggregate:
    def test_empty_adjacency(self):
        rng = np.random.default_rng(7)
        params = graph.init_gnn(3, rng)
        node_h = rng.standard_normal((4, 3))
        u, g = graph.gnn_aggregate(node_h, np.zeros((4, 4, 3)), np.zeros((4, 4)), params)
        expected = np.maximum(
            np.concatenate([node_h, np.zeros((4, 3))], axis=1) @ params.w_node.T
            + params.b_node, 0.0)
        np.testing.assert_allclose(u, expected, atol=1e-14)

    def test_single_node(self):
        rng = np.random.default_rng(8)
        params = graph.init_gnn(3, rng)
        node_h = rng.standard_normal((1, 3))
        u, g = graph.gnn_aggregate(node_h, np.zeros((1, 1, 3)), np.zeros((1, 1)), params)
        np.testing.assert_array_equal(g, u[0])

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            n, m = 5, 4
            params = graph.init_gnn(m, rng)
            node_h = rng.standard_normal((n, m))
            edge_h = rng.standard_normal((n, n, m))
            adj = rng.standard_normal((n, n)) * (rng.random((n, n)) < 0.4)
            np.fill_diagonal(adj, 0.0)
            u, g = graph.gnn_aggregate(node_h, edge_h, adj, params)
            u_ref, g_ref = oracles.naive_message_passing(
                node_h, edge_h, adj, params.w_edge, params.b_edge,
                params.w_node, params.b_node)
            np.testing.assert_allclose(u, u_ref, atol=1e-12)
            np.testing.assert_allclose(g, g_ref, atol=1e-12)


class TestGraphSpd:
    def test_zero_states(self):
        out = graph.graph_spd(np.zeros((4, 6)), 1e-4)
        np.testing.assert_allclose(out, 1e-4 * np.eye(4))

    def test_identical_rows_perfect_correlation(self):
        rng = np.random.default_rng(10)
        row = rng.standard_normal(8)
        states = np.stack([row, row, rng.standard_normal(8)])
        eps = 1e-4
        out = graph.graph_spd(states, eps)
        np.testing.assert_allclose(out[0, 1], out[0, 0] - eps, atol=1e-12)

    def test_matches_naive_gram(self):
        rng = np.random.default_rng(11)
        states = rng.standard_normal((5, 7))
        eps = 1e-4
        centered = states - states.mean(axis=1, keepdims=True)
        expected = centered @ centered.T / 7 + eps * np.eye(5)
        out = graph.graph_spd(states, eps)
        np.testing.assert_allclose(out, expected, atol=1e-12)
        assert min_eigenvalue(out) > 0


class TestTrialEncoding:
    def _structure(self, seed=12, n=4, T=3, L=16):
        rng = np.random.default_rng(seed)
        trial = rng.standard_normal((T, n, L))
        return rng, graph.build_graph_structure(trial, window=8, hop=4, tau_top=2)

    def test_structure_shapes_and_sparsity(self):
        rng, s = self._structure()
        assert s.features.shape == (4, 3, 5)
        assert s.adjacency.shape == (3, 4, 4)
        for t in range(3):
            assert np.all((s.adjacency[t] != 0).sum(axis=1) <= 4)
            np.testing.assert_array_equal(s.adjacency[t], s.adjacency[t].T)

    def test_dense_contract_matches_batched_encoder(self):
        rng, s = self._structure()
        node_gru = graph.init_gru(5, 4, rng)
        edge_gru = graph.init_gru(1, 4, rng)
        gnn = graph.init_gnn(4, rng)
        seq = graph.encode_graph(node_gru, edge_gru, gnn, s, eps=1e-4)
        mean_adj = s.adjacency.mean(axis=0)
        u_ref, g_ref = graph.gnn_aggregate(
            seq.node_embed[:, -1, :], seq.edge_embed[:, :, -1, :], mean_adj, gnn)
        np.testing.assert_allclose(seq.node_out, u_ref, atol=1e-10)
        np.testing.assert_allclose(seq.global_out, g_ref, atol=1e-10)

    def test_per_epoch_spd_matches_graph_spd(self):
        rng, s = self._structure()
        node_gru = graph.init_gru(5, 4, rng)
        edge_gru = graph.init_gru(1, 4, rng)
        gnn = graph.init_gnn(4, rng)
        enc = graph.encode_graph_batch(node_gru, edge_gru, gnn, [s], 1e-4,
                                       spd_lift=graph.graph_spd)
        c_seq = np.asarray(enc.c_seq)[0]
        for t in range(3):
            states = np.stack([graph.gru_sequence(node_gru, s.features[i])[1][t]
                               for i in range(4)])
            np.testing.assert_allclose(c_seq[t], graph.graph_spd(states, 1e-4), atol=1e-10)
            assert min_eigenvalue(c_seq[t]) > 0

    def test_channel_permutation_equivariance(self):
        rng = np.random.default_rng(13)
        trial = rng.standard_normal((3, 5, 16))
        perm = np.array([3, 0, 4, 1, 2])
        s1 = graph.build_graph_structure(trial, 8, 4, 2)
        s2 = graph.build_graph_structure(trial[:, perm, :], 8, 4, 2)
        for t in range(3):
            np.testing.assert_allclose(s2.adjacency[t], s1.adjacency[t][perm][:, perm],
                                       atol=1e-12)
        node_gru = graph.init_gru(s1.features.shape[2], 4, rng)
        for i, p in enumerate(perm):
            np.testing.assert_allclose(
                graph.gru_sequence(node_gru, s2.features[i])[0],
                graph.gru_sequence(node_gru, s1.features[p])[0], atol=1e-14)


class TestGraphBackward:
    def test_zero_upstream(self):
        rng = np.random.default_rng(14)
        trial = rng.standard_normal((3, 4, 16))
        s = graph.build_graph_structure(trial, 8, 4, 2)
        node_gru = graph.init_gru(5, 4, rng)
        edge_gru = graph.init_gru(1, 4, rng)
        gnn = graph.init_gnn(4, rng)
        grads = graph.graph_backward(node_gru, edge_gru, gnn, s, 1e-4,
                                     np.zeros((3, 4, 4)), np.zeros((4, 4)), np.zeros(4))
        for group in grads:
            for _, arr in vars(group).items() if not hasattr(group, "_fields") else []:
                assert not arr.any()
        assert not grads.gnn.w_edge.any()
        assert not grads.node_gru.w_z.any()

    def test_finite_differences(self):
        for seed in range(15):
            assert check_graph(seed) <= 1e-4
