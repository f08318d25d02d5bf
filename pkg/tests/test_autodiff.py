"""Gradient and contract tests for the autodiff engine."""

import numpy as np
import pytest

from rlip import autodiff as ad


def rand(shape, seed=0, scale=1.0):
    return np.random.default_rng(seed).normal(size=shape) * scale


def check_op(build, params, seed=0, eps=1e-5, tol=1e-7, samples=8):
    err = ad.gradient_check(build, params, epsilon=eps,
                            samples_per_param=samples,
                            rng=np.random.default_rng(seed))
    assert err < tol, f"gradient error {err}"


class TestBasicOps:
    def test_sum_gradient_is_ones(self):
        x = ad.Tensor([1.0, 2.0, 3.0], requires_grad=True)
        x.sum().backward()
        assert np.array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_square_gradient(self):
        x = ad.Tensor(2.0, requires_grad=True)
        (x * x).backward()
        assert x.grad == pytest.approx(4.0)

    def test_softmax_uniform(self):
        out = ad.softmax(ad.Tensor([0.0, 0.0, 0.0]))
        assert np.allclose(out.data, 1 / 3)

    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(ad.Tensor(0.0)).item() == pytest.approx(0.5)

    def test_gradient_accumulates_across_uses(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        y = x + x
        y.sum().backward()
        assert np.array_equal(x.grad, [2.0, 2.0])

    def test_backward_requires_scalar(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            (x * x).backward()

    def test_broadcast_add_gradient_shape(self):
        x = ad.Tensor(rand((3, 4), 1), requires_grad=True)
        b = ad.Tensor(rand(4, 2), requires_grad=True)
        (x + b).sum().backward()
        assert x.grad.shape == (3, 4)
        assert b.grad.shape == (4,)
        assert np.allclose(b.grad, 3.0)

    def test_non_finite_raises(self):
        with pytest.raises(ad.NonFiniteError):
            ad.log(ad.Tensor([0.0, -1.0]))


class TestSoftmaxCrossEntropyOracle:
    def test_grad_is_p_minus_y(self):
        # symbolic oracle: d/dz of -log softmax(z)[k] equals softmax(z) - onehot(k)
        logits = ad.Tensor(np.zeros(5), requires_grad=True)
        loss = -ad.narrow(ad.log_softmax(logits), 0, 2, 1).sum()
        loss.backward()
        p = np.full(5, 0.2)
        y = np.eye(5)[2]
        assert np.allclose(logits.grad, p - y, atol=1e-15)

    def test_grad_general_logits(self):
        z = np.array([0.3, -1.2, 2.0, 0.0])
        logits = ad.Tensor(z, requires_grad=True)
        loss = -ad.narrow(ad.log_softmax(logits), 0, 1, 1).sum()
        loss.backward()
        p = np.exp(z) / np.exp(z).sum()
        assert np.allclose(logits.grad, p - np.eye(4)[1], atol=1e-12)


@pytest.mark.parametrize("name,fn,positive", [
    ("mul", lambda a, b: (a * b).sum(), False),
    ("div", lambda a, b: (a / (b * b + 1.0)).sum(), False),
    ("matmul", lambda a, b: (a @ b).sum(), False),
    ("sub", lambda a, b: (a - 2.0 * b).mean(), False),
])
def test_binary_op_gradients(name, fn, positive):
    a = ad.Tensor(rand((4, 4), 10), requires_grad=True)
    b = ad.Tensor(rand((4, 4), 11) + 0.1, requires_grad=True)
    check_op(lambda: fn(a, b), [a, b])


@pytest.mark.parametrize("name,fn,data", [
    ("exp", ad.exp, rand((3, 3), 1)),
    ("log", ad.log, np.abs(rand((3, 3), 2)) + 0.5),
    ("sqrt", ad.sqrt, np.abs(rand((3, 3), 3)) + 0.5),
    ("sigmoid", ad.sigmoid, rand((3, 3), 4, 2.0)),
    ("tanh", ad.tanh, rand((3, 3), 5, 2.0)),
    ("softplus", ad.softplus, rand((3, 3), 6, 3.0)),
    ("gelu", ad.gelu, rand((3, 3), 7, 2.0)),
    ("abs", ad.tabs, rand((3, 3), 8) + 0.3),
    ("power3", lambda t: ad.power(t, 3.0), np.abs(rand((3, 3), 9)) + 0.2),
    ("softmax", lambda t: ad.softmax(t, axis=-1), rand((2, 5), 12)),
    ("log_softmax", lambda t: ad.log_softmax(t, axis=-1), rand((2, 5), 13)),
])
def test_unary_op_gradients(name, fn, data):
    x = ad.Tensor(data, requires_grad=True)
    check_op(lambda: (fn(x) * ad.constant(rand(x.shape, 99))).sum(), [x], tol=1e-6)


def test_minimum_maximum_gradients_away_from_ties():
    a = ad.Tensor(np.array([1.0, 5.0, -2.0]), requires_grad=True)
    b = ad.Tensor(np.array([2.0, 1.0, -1.0]), requires_grad=True)
    check_op(lambda: (ad.minimum(a, b) + 2.0 * ad.maximum(a, b)).sum(), [a, b])


def test_gather_rows_scatter_adds():
    x = ad.Tensor(rand((5, 3), 20), requires_grad=True)
    out = ad.gather_rows(x, [0, 2, 0])
    out.sum().backward()
    expected = np.zeros((5, 3))
    expected[0] = 2.0
    expected[2] = 1.0
    assert np.allclose(x.grad, expected)


def test_concat_narrow_transpose_reshape_gradients():
    a = ad.Tensor(rand((2, 3), 30), requires_grad=True)
    b = ad.Tensor(rand((2, 2), 31), requires_grad=True)

    def build():
        c = ad.concat([a, b], axis=1)              # (2, 5)
        d = ad.transpose(c, (1, 0))                # (5, 2)
        e = ad.reshape(d, (10,))
        return (e * ad.constant(rand(10, 32))).sum() + ad.narrow(c, 1, 1, 2).sum()

    check_op(build, [a, b])


def test_layer_norm_gradients_and_normalization():
    g = ad.Tensor(np.ones(6) * 1.3, requires_grad=True)
    b = ad.Tensor(rand(6, 40, 0.1), requires_grad=True)
    x = ad.Tensor(rand((4, 6), 41, 2.0), requires_grad=True)
    out = ad.layer_norm(x, g, b)
    normalized = (out.data - b.data) / g.data
    assert np.allclose(normalized.mean(axis=-1), 0, atol=1e-12)
    assert np.allclose(normalized.std(axis=-1), 1, atol=1e-4)
    check_op(lambda: (ad.layer_norm(x, g, b) * ad.constant(rand((4, 6), 42))).sum(),
             [x, g, b], tol=1e-6)


def test_broadcast_to_gradient_sums():
    x = ad.Tensor(rand((1, 3), 50), requires_grad=True)
    ad.broadcast_to(x, (4, 3)).sum().backward()
    assert np.allclose(x.grad, 4.0)


class TestGradientCheckHarness:
    def test_quadratic_precision(self):
        x = ad.Tensor(rand(4, 60), requires_grad=True)
        err = ad.gradient_check(lambda: (x * x).sum(), [x], epsilon=1e-5)
        assert err < 1e-7

    def test_empty_parameter_set(self):
        assert ad.gradient_check(lambda: ad.Tensor(0.0, requires_grad=True), []) == 0.0

    def test_epsilon_must_be_positive(self):
        x = ad.Tensor(rand(2, 61), requires_grad=True)
        with pytest.raises(ValueError):
            ad.gradient_check(lambda: (x * x).sum(), [x], epsilon=0.0)


def test_forward_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(123)
        x = ad.Tensor(rng.normal(size=(4, 8)), requires_grad=True)
        w = ad.Tensor(rng.normal(size=(8, 8)), requires_grad=True)
        return ad.gelu(x @ w).sum().item()

    assert run() == run()


def test_no_grad_skips_graph():
    x = ad.Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad
