import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from uae import autodiff as ad
from uae.errors import NonScalarRoot, ShapeMismatch
from helpers import elementwise_check

finite = st.floats(-2.0, 2.0, allow_nan=False)


class TestBasics:
    def test_square_at_three(self):
        x = ad.Node(3.0)
        (g,) = ad.grad_of(x * x, [x])
        assert g == 6.0

    def test_tanh_at_zero(self):
        x = ad.Node(0.0)
        (g,) = ad.grad_of(ad.tanh(x), [x])
        assert g == 1.0

    def test_non_scalar_root(self):
        with pytest.raises(NonScalarRoot):
            ad.backward(ad.Node(np.ones(3)) * 2.0)

    def test_fan_out_accumulates(self):
        x = ad.Node(2.0)
        y = x * x + x * 3.0 + x  # 2x + 4
        (g,) = ad.grad_of(y, [x])
        assert g == pytest.approx(8.0)

    def test_grads_reset_between_passes(self):
        x = ad.Node(1.5)
        f = ad.square(x)
        ad.backward(f)
        ad.backward(f)
        assert x.grad == pytest.approx(3.0)

    def test_backward_returns_leaves(self):
        a, b = ad.Node(2.0), ad.Node(5.0)
        leaves = ad.backward(a * b)
        assert leaves[a] == 5.0 and leaves[b] == 2.0

    def test_unreached_node_gets_zero(self):
        a, b = ad.Node(np.ones(2)), ad.Node(np.ones(3))
        ga, gb = ad.grad_of(ad.sum_(a), [a, b])
        np.testing.assert_array_equal(gb, np.zeros(3))

    def test_constant_blocks_gradient(self):
        x = ad.Node(2.0)
        (g,) = ad.grad_of(x * ad.constant(x), [x])
        assert g == 2.0

    def test_matmul_needs_2d(self):
        with pytest.raises(ShapeMismatch):
            ad.matmul(ad.Node(np.ones(3)), ad.Node(np.ones((3, 2))))

    def test_matmul_inner_dims(self):
        with pytest.raises(ShapeMismatch):
            ad.matmul(ad.Node(np.ones((2, 3))), ad.Node(np.ones((2, 2))))


UNARY = {
    "exp": ad.exp,
    "tanh": ad.tanh,
    "square": ad.square,
    "leaky_relu": lambda x: ad.leaky_relu(x, 0.01),
    "power3": lambda x: ad.power(x, 3),
    "neg": ad.neg,
    "log_abs_shift": lambda x: ad.log(x * x + 1.0),
    "sqrt_shift": lambda x: ad.sqrt(x * x + 0.5),
    "div": lambda x: 1.0 / (x * x + 1.0),
    "maximum": lambda x: ad.maximum(x, 0.1),
    "amax": lambda x: ad.amax(x, axis=-1),
    "mean_axis": lambda x: ad.mean(x, axis=0),
    "transpose": lambda x: ad.transpose(x) * np.arange(x.shape[0])[None, :],
    "reshape": lambda x: ad.reshape(x, (-1,)) * np.arange(x.value.size),
    "getitem": lambda x: x[np.array([0, 0, 1]), :] * 2.0,
    "concat": lambda x: ad.concat([x, ad.square(x)], axis=1),
    "stack": lambda x: ad.stack([x, ad.exp(x)], axis=0),
}


class TestGradientCheck:
    @pytest.mark.parametrize("name", sorted(UNARY))
    @given(x=arrays(np.float64, (3, 4), elements=finite))
    @settings(max_examples=20, deadline=None)
    def test_unary_ops(self, name, x):
        fn = UNARY[name]
        if name in ("leaky_relu", "maximum"):
            x = np.where(np.abs(x) < 1e-3, 0.5, x)  # keep away from the kink
            x = np.where(np.abs(x - 0.1) < 1e-3, 0.5, x)
        if name == "amax":
            x = x + np.arange(4) * 1e-2  # unique maxima
        grad, fd = elementwise_check(fn, x)
        np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-6)

    @given(a=arrays(np.float64, (2, 3, 4), elements=finite), b=arrays(np.float64, (4, 2), elements=finite))
    @settings(max_examples=20, deadline=None)
    def test_batched_matmul_broadcast(self, a, b):
        bn = ad.Node(b)
        grad, fd = elementwise_check(lambda x: ad.matmul(x, bn), a)
        np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-6)
        an = ad.Node(a)
        grad, fd = elementwise_check(lambda y: ad.matmul(an, y), b)
        np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-6)

    @given(a=arrays(np.float64, (3, 4), elements=finite), b=arrays(np.float64, (4,), elements=finite))
    @settings(max_examples=20, deadline=None)
    def test_broadcast_binary(self, a, b):
        an = ad.Node(a)
        for op in (ad.add, ad.sub, ad.mul):
            grad, fd = elementwise_check(lambda y: op(an, y), b)
            np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-6)
        grad, fd = elementwise_check(lambda y: an / (y * y + 1.0), b)
        np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-6)

    def test_repeated_index_accumulates(self):
        x = ad.Node(np.array([1.0, 2.0]))
        (g,) = ad.grad_of(ad.sum_(x[np.array([0, 0, 0, 1])]), [x])
        np.testing.assert_array_equal(g, [3.0, 1.0])
