"""Tape mechanics: primitive correctness, adjoint accumulation, determinism."""

import numpy as np
import pytest

from geospd import autodiff as ad
from geospd.errors import InvalidInput
from geospd.gradcheck import central_difference, check_conv2d

import oracles


def grad_of(f, *arrays):
    """Run f on tape leaves and return (value, grads...)."""
    tape = ad.Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = f(*leaves)
    grads = ad.backward(tape, out)
    return float(out.data), [grads.wrt(v) for v in leaves]


class TestBasics:
    def test_identity_gradient(self):
        val, (g,) = grad_of(lambda x: ad.sum_(x), np.array([2.0, 3.0]))
        np.testing.assert_array_equal(g, [1.0, 1.0])

    def test_square_at_three(self):
        val, (g,) = grad_of(lambda x: ad.sum_(ad.mul(x, x)), np.array(3.0).reshape(()))
        assert val == 9.0 and g == 6.0

    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((3, 3))
        out = ad.matmul(np.eye(3), A)
        np.testing.assert_array_equal(out, A)

    def test_seed_must_be_scalar(self):
        tape = ad.Tape()
        v = tape.leaf(np.zeros(3))
        with pytest.raises(InvalidInput):
            ad.backward(tape, v)

    def test_unreachable_leaf_gets_zeros(self):
        tape = ad.Tape()
        a = tape.leaf(np.ones(2))
        b = tape.leaf(np.ones(2))
        out = ad.sum_(a)
        grads = ad.backward(tape, out)
        np.testing.assert_array_equal(grads.wrt(b), np.zeros(2))

    def test_shape_discipline(self):
        with pytest.raises(InvalidInput):
            ad.add(np.ones((2, 2)), np.ones(2))
        # scalar-times-tensor is the allowed exception
        np.testing.assert_array_equal(ad.mul(np.ones((2, 2)), 3.0), 3.0 * np.ones((2, 2)))

    def test_constants_accumulate_no_adjoint(self):
        tape = ad.Tape()
        a = tape.leaf(np.ones(2))
        c = tape.const(np.full(2, 5.0))
        out = ad.sum_(ad.mul(a, c))
        grads = ad.backward(tape, out)
        np.testing.assert_array_equal(grads.wrt(a), [5.0, 5.0])


class TestPrimitives:
    def test_elementwise_forward_matches_numpy(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((3, 4))
        y = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(ad.add(x, y), x + y)
        np.testing.assert_array_equal(ad.sub(x, y), x - y)
        np.testing.assert_array_equal(ad.mul(x, y), x * y)
        np.testing.assert_allclose(ad.div(x, np.abs(y) + 1.0), x / (np.abs(y) + 1.0))
        np.testing.assert_allclose(ad.sigmoid(x), 1.0 / (1.0 + np.exp(-x)))
        np.testing.assert_array_equal(ad.relu(x), np.maximum(x, 0.0))
        np.testing.assert_array_equal(ad.tanh(x), np.tanh(x))

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((5, 7)) * 30.0
        out = ad.softmax(x)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
        # shift invariance
        np.testing.assert_allclose(ad.softmax(x + 100.0), out, atol=1e-12)

    def test_log_softmax_consistent(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 6))
        np.testing.assert_allclose(np.exp(ad.log_softmax(x)), ad.softmax(x), atol=1e-12)

    def test_conv2d_matches_naive_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 3, 6, 8))
        k = rng.standard_normal((4, 3, 2, 3))
        np.testing.assert_allclose(ad.conv2d(x, k), oracles.naive_conv2d(x, k), atol=1e-12)

    def test_conv2d_gradients(self):
        for seed in range(5):
            assert check_conv2d(seed) <= 1e-6

    def test_gather_and_segment_roundtrip(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((6, 3))
        idx = np.array([0, 0, 2, 5])
        np.testing.assert_array_equal(ad.gather_rows(x, idx), x[idx])
        seg = ad.segment_sum(x, np.array([0, 0, 1, 1, 2, 2]), 3)
        np.testing.assert_allclose(seg, x.reshape(3, 2, 3).sum(axis=1), atol=1e-15)

    def test_structural_op_gradients(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((4, 5))
        G1 = rng.standard_normal((2, 5))
        G2 = rng.standard_normal((4, 5))

        def f(v):
            top = ad.slice_(v, (slice(0, 2),))
            stacked = ad.concat([top, ad.mul(top, 2.0)], axis=0)
            moved = ad.transpose(ad.reshape(stacked, (4, 5)), (1, 0))
            return ad.add(ad.sum_(ad.mul(ad.transpose(moved), G2)),
                          ad.mean(ad.mul(top, G1)))

        val, (g,) = grad_of(f, x)
        direction = rng.standard_normal(x.shape)
        fd = central_difference(lambda z: float(grad_of(f, z)[0]), x, direction)
        assert abs(float(np.sum(g * direction)) - fd) <= 1e-8 * max(1.0, abs(fd))

    def test_expand_gradient_sums(self):
        val, (g,) = grad_of(lambda b: ad.sum_(ad.expand(ad.reshape(b, (1, 3)), (4, 3))),
                            np.zeros(3))
        np.testing.assert_array_equal(g, [4.0, 4.0, 4.0])


class TestAccumulation:
    def test_linearity_of_adjoints(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal(5)
        a, b = 2.5, -1.25

        def f(v):
            return ad.sum_(ad.mul(v, v))

        def g(v):
            return ad.sum_(ad.exp(ad.mul(v, 0.1)))

        _, (gf,) = grad_of(f, x)
        _, (gg,) = grad_of(g, x)
        _, (gc,) = grad_of(lambda v: ad.add(ad.mul(f(v), a), ad.mul(g(v), b)), x)
        np.testing.assert_allclose(gc, a * gf + b * gg, atol=1e-12)

    def test_fanout_accumulates(self):
        val, (g,) = grad_of(lambda x: ad.add(ad.sum_(x), ad.sum_(ad.mul(x, x))),
                            np.array([1.0, 2.0]))
        np.testing.assert_array_equal(g, [3.0, 5.0])

    def test_determinism_bit_identical(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((6, 6))

        def run():
            tape = ad.Tape()
            v = tape.leaf(x)
            out = ad.sum_(ad.mul(ad.softmax(ad.matmul(v, ad.transpose(v))), 0.5))
            return ad.backward(tape, out).wrt(v)

        g1, g2 = run(), run()
        assert np.array_equal(g1, g2)

    def test_backward_visits_nodes_once(self):
        # A diamond: x -> (a, b) -> out; the shared input must get exactly
        # the sum of both paths, not a multiple.
        x = np.array([1.5])
        val, (g,) = grad_of(
            lambda v: ad.sum_(ad.add(ad.mul(v, 2.0), ad.mul(v, 3.0))), x
        )
        np.testing.assert_array_equal(g, [5.0])
