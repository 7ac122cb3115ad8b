"""Tests for the reverse-mode autodiff substrate."""

import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from duetrank.autodiff import Tensor, dropout, embedding_lookup, softmax_temp


def finite_difference(make_loss, params, rng, points=10, h=1e-5):
    """Worst relative error between analytic and central-difference grads.

    The error floor of 1e-6 in the denominator keeps near-zero true
    gradients from registering as spurious disagreement.
    """
    loss = make_loss()
    loss.backward()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.ravel()
        idxs = rng.choice(flat.size, size=min(points, flat.size), replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            up = make_loss().item()
            flat[i] = orig - h
            down = make_loss().item()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            a = an.ravel()[i]
            rel = abs(fd - a) / max(abs(fd), abs(a), 1e-6)
            worst = max(worst, rel)
    return worst


class TestSoftmaxTemp:
    def test_uniform_logits(self):
        out = softmax_temp(np.array([0.0, 0.0, 0.0]), tau=1.0)
        np.testing.assert_allclose(out, [1 / 3, 1 / 3, 1 / 3], atol=1e-12)

    def test_analytic_two_logits(self):
        out = softmax_temp(np.array([math.log(2), 0.0]), tau=1.0)
        np.testing.assert_allclose(out, [2 / 3, 1 / 3], atol=1e-12)

    def test_temperature_three(self):
        # softmax([3,0]/3) == softmax([1,0])
        out = softmax_temp(np.array([3.0, 0.0]), tau=3.0)
        e = math.e
        np.testing.assert_allclose(out, [e / (e + 1), 1 / (e + 1)], atol=1e-12)
        np.testing.assert_allclose(out, [0.7311, 0.2689], atol=1e-4)

    def test_batched_rows_normalize(self):
        rng = np.random.default_rng(0)
        out = softmax_temp(rng.standard_normal((5, 7)), tau=2.5)
        np.testing.assert_allclose(out.sum(axis=-1), np.ones(5), atol=1e-12)

    def test_invalid_temperature(self):
        with pytest.raises(ValueError):
            softmax_temp(np.array([1.0]), tau=0.0)

    def test_empty_logits(self):
        with pytest.raises(ValueError):
            softmax_temp(np.array([]), tau=1.0)

    @given(
        logits=st.lists(st.floats(-50, 50), min_size=2, max_size=8),
        tau=st.floats(0.1, 20.0),
    )
    @settings(max_examples=50, deadline=None)
    def test_normalized_and_argmax_invariant(self, logits, tau):
        z = np.array(logits)
        out = softmax_temp(z, tau)
        assert abs(out.sum() - 1.0) < 1e-12
        assert (out >= 0).all()
        # The temperature rescales but never reorders; skip degenerate
        # near-ties where float rounding makes the argmax ambiguous.
        top, runner = np.sort(z)[-2:][::-1]
        assume(top - runner > 1e-9 * max(1.0, abs(top)))
        assert np.argmax(out) == np.argmax(z)


class TestBasicGradients:
    def test_product_rule(self):
        x = Tensor(2.0, requires_grad=True)
        y = Tensor(3.0, requires_grad=True)
        (x * y).backward()
        assert x.grad == pytest.approx(3.0)
        assert y.grad == pytest.approx(2.0)

    def test_tanh_at_zero(self):
        x = Tensor(np.array([0.0]), requires_grad=True)
        x.tanh().sum().backward()
        np.testing.assert_allclose(x.grad, [1.0], atol=1e-12)

    def test_backward_requires_scalar(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ValueError):
            x.backward()

    def test_grad_accumulates_over_reuse(self):
        x = Tensor(3.0, requires_grad=True)
        (x * x).backward()
        assert x.grad == pytest.approx(6.0)

    def test_detach_cuts_graph(self):
        x = Tensor(2.0, requires_grad=True)
        (x.detach() * x).backward()
        assert x.grad == pytest.approx(2.0)


class TestFiniteDifference:
    def test_three_layer_composition(self):
        rng = np.random.default_rng(42)
        w1 = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
        w2 = Tensor(rng.standard_normal((6, 5)), requires_grad=True)
        w3 = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
        x = np.random.default_rng(7).standard_normal((2, 4))

        def loss():
            for p in (w1, w2, w3):
                p.grad = None
            h = (Tensor(x) @ w1).tanh()
            h = (h @ w2).softmax(axis=-1)
            return ((h @ w3).log_softmax(axis=-1) * Tensor(np.ones((2, 3)))).sum()

        assert finite_difference(loss, [w1, w2, w3], rng) < 1e-4

    def test_elementwise_ops(self):
        rng = np.random.default_rng(3)
        a = Tensor(np.abs(rng.standard_normal((3, 4))) + 0.5, requires_grad=True)

        def loss():
            a.grad = None
            return (a.log() + a.exp() * 0.01 + a.sigmoid() + a.gelu() + a.pow(2.0)).sum()

        assert finite_difference(loss, [a], rng) < 1e-4

    def test_layer_norm(self):
        rng = np.random.default_rng(5)
        a = Tensor(rng.standard_normal((2, 3, 8)), requires_grad=True)

        def loss():
            a.grad = None
            return (a.layer_norm() * Tensor(rng0)).sum()

        rng0 = np.random.default_rng(6).standard_normal((2, 3, 8))
        assert finite_difference(loss, [a], rng) < 1e-4

    def test_matmul_shapes(self):
        rng = np.random.default_rng(8)
        v = Tensor(rng.standard_normal(5), requires_grad=True)
        m = Tensor(rng.standard_normal((2, 5, 3)), requires_grad=True)
        s = Tensor(rng.standard_normal((3, 5)), requires_grad=True)

        def loss():
            for p in (v, m, s):
                p.grad = None
            return (v @ m).sum() + (s @ v).sum() + (m.transpose(0, 2, 1) @ v).sum()

        assert finite_difference(loss, [v, m, s], rng) < 1e-4

    def test_indexing_and_reshape(self):
        rng = np.random.default_rng(9)
        a = Tensor(rng.standard_normal((4, 6)), requires_grad=True)

        def loss():
            a.grad = None
            return a[1:3].reshape(12).pow(2.0).sum() + a[0].mean()

        assert finite_difference(loss, [a], rng) < 1e-4

    def test_embedding_lookup(self):
        rng = np.random.default_rng(10)
        table = Tensor(rng.standard_normal((7, 4)), requires_grad=True)
        ids = np.array([[0, 3, 3], [6, 1, 0]])

        def loss():
            table.grad = None
            return embedding_lookup(table, ids).tanh().sum()

        assert finite_difference(loss, [table], rng) < 1e-4

    def test_broadcast_add_mul(self):
        rng = np.random.default_rng(11)
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal(4), requires_grad=True)

        def loss():
            a.grad = None
            b.grad = None
            return ((a + b) * b - a / 2.0).sum()

        assert finite_difference(loss, [a, b], rng) < 1e-4


class TestDropout:
    def test_eval_mode_identity(self):
        x = Tensor(np.random.default_rng(0).standard_normal((5, 5)))
        out = dropout(x, 0.5, training=False, rng=None)
        assert out is x

    def test_zero_rate_identity(self):
        x = Tensor(np.ones((3, 3)))
        out = dropout(x, 0.0, training=True, rng=np.random.default_rng(0))
        assert out is x

    def test_expected_value_preserved(self):
        rng = np.random.default_rng(1)
        x = Tensor(np.full(10_000, 2.0))
        out = dropout(x, 0.3, training=True, rng=rng)
        assert out.data.mean() == pytest.approx(2.0, rel=0.02)

    def test_invalid_rate(self):
        with pytest.raises(ValueError):
            dropout(Tensor(np.ones(3)), 1.0, training=True, rng=np.random.default_rng(0))

    def test_training_needs_rng(self):
        with pytest.raises(ValueError):
            dropout(Tensor(np.ones(3)), 0.5, training=True, rng=None)

    def test_gradient_masks_match_forward(self):
        x = Tensor(np.ones(1000), requires_grad=True)
        out = dropout(x, 0.4, training=True, rng=np.random.default_rng(2))
        out.sum().backward()
        # Gradient is exactly the scaled keep mask.
        np.testing.assert_allclose(x.grad, out.data, atol=1e-12)
