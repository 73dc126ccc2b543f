import math

import numpy as np
import pytest

from helpers import check_gradients, leaf

from olora import tensor as T
from olora.errors import ContractError, ShapeError


class TestMatmul:
    def test_identity(self):
        a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(a, T.Tensor(np.eye(2)))
        assert np.array_equal(out.nd, [[1, 2], [3, 4]])

    def test_against_triple_loop(self):
        # naive oracle: [[1,2]] x [[3],[4]] = [[1*3 + 2*4]] = [[11]]
        out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
        assert out.nd.shape == (1, 1)
        assert out.nd[0, 0] == 11.0

    def test_random_against_triple_loop(self):
        rng = T.make_rng(7)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        expect = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expect[i, j] += a[i, k] * b[k, j]
        out = T.matmul(T.Tensor(a, dtype=np.float64), T.Tensor(b, dtype=np.float64))
        assert np.allclose(out.nd, expect, atol=1e-12)

    def test_shape_mismatch(self):
        a = T.Tensor(np.zeros((2, 3)))
        b = T.Tensor(np.zeros((2, 3)))
        with pytest.raises(ShapeError, match=r"\(2, 3\)"):
            T.matmul(a, b)


class TestElementwise:
    def test_add_zero(self):
        x = T.Tensor([1.0, -2.0, 3.0])
        out = T.add(x, T.zeros_like(x))
        assert np.array_equal(out.nd, x.nd)

    def test_mul_hand(self):
        out = T.mul(T.Tensor([1.0, 2.0, 3.0]), T.Tensor([4.0, 5.0, 6.0]))
        assert np.array_equal(out.nd, [4.0, 10.0, 18.0])

    def test_gelu_fixed_point(self):
        assert T.gelu(T.Tensor([0.0])).nd[0] == 0.0

    def test_gelu_tanh_form(self):
        # pinned formula: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
        x = 1.3
        expect = 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
        got = T.gelu(T.Tensor([x], dtype=np.float64)).nd[0]
        assert got == pytest.approx(expect, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.add(T.Tensor([1.0]), T.Tensor([1.0, 2.0]))

    def test_dispatcher(self):
        out = T.elementwise("scale", T.Tensor([2.0]), 3.0)
        assert out.nd[0] == 6.0
        with pytest.raises(ContractError):
            T.elementwise("div", T.Tensor([1.0]))


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(T.Tensor([[0.0, 0.0]]), axis=1)
        assert np.allclose(out.nd, [[0.5, 0.5]])

    def test_hand_value(self):
        out = T.softmax(T.Tensor([[math.log(2.0), 0.0]], dtype=np.float64), axis=1)
        assert np.allclose(out.nd, [[2 / 3, 1 / 3]], atol=1e-12)

    def test_overflow_stability(self):
        out = T.softmax(T.Tensor([[1000.0, 0.0]]), axis=1).nd
        assert np.all(np.isfinite(out))
        assert out[0, 0] == pytest.approx(1.0)
        assert out[0, 1] == pytest.approx(0.0, abs=1e-6)

    def test_rows_sum_to_one(self):
        rng = T.make_rng(3)
        for _ in range(20):
            x = T.Tensor(rng.standard_normal((4, 7)) * 5)
            out = T.softmax(x, axis=1).nd
            assert np.all(out >= 0)
            assert np.allclose(out.sum(axis=1), 1.0, atol=1e-6)

    def test_bad_axis(self):
        with pytest.raises(IndexError):
            T.softmax(T.Tensor([[1.0]]), axis=2)


class TestLayerNorm:
    def test_constant_row_zeroes(self):
        x = T.Tensor(np.full((2, 5), 3.0))
        out = T.layer_norm(x, T.Tensor(np.ones(5)), T.Tensor(np.zeros(5)))
        assert np.allclose(out.nd, 0.0, atol=1e-3)

    def test_constant_row_shift(self):
        x = T.Tensor(np.full((1, 4), 2.0))
        out = T.layer_norm(x, T.Tensor(np.ones(4)), T.Tensor(np.full(4, 7.0)))
        assert np.allclose(out.nd, 7.0, atol=1e-3)

    def test_two_point_row(self):
        x = T.Tensor([[1.0, 3.0]], dtype=np.float64)
        out = T.layer_norm(x, T.Tensor(np.ones(2), dtype=np.float64),
                           T.Tensor(np.zeros(2), dtype=np.float64), eps=1e-12)
        assert np.allclose(out.nd, [[-1.0, 1.0]], atol=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.layer_norm(T.Tensor(np.zeros((2, 4))), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)))


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = T.Tensor(np.zeros((3, 10)))
        assert T.cross_entropy(logits, [0, 5, 9]).item() == pytest.approx(math.log(10), abs=1e-6)

    def test_confident_limit(self):
        logits = T.Tensor([[40.0, 0.0]])
        assert T.cross_entropy(logits, [0]).item() == pytest.approx(0.0, abs=1e-6)

    def test_hand_value(self):
        logits = T.Tensor([[math.log(2.0), 0.0]], dtype=np.float64)
        assert T.cross_entropy(logits, [0]).item() == pytest.approx(-math.log(2 / 3), rel=1e-9)

    def test_nonnegative(self):
        rng = T.make_rng(11)
        for _ in range(20):
            logits = T.Tensor(rng.standard_normal((5, 6)) * 3)
            labels = rng.integers(0, 6, size=5)
            assert T.cross_entropy(logits, labels).item() >= 0.0

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            T.cross_entropy(T.Tensor(np.zeros((1, 4))), [4])


class TestBackward:
    def test_quadratic(self):
        x = T.Tensor([3.0], requires_grad=True)
        T.backward(T.tensor_sum(T.mul(x, x)))
        assert np.allclose(x.grad, [6.0])

    def test_constant_graph_noop(self):
        x = T.Tensor([1.0, 2.0])
        loss = T.tensor_sum(T.mul(x, x))
        T.backward(loss)  # nothing requires grad
        assert x.grad is None

    def test_non_scalar_root(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            T.backward(T.mul(x, x))

    def test_accumulation_until_reset(self):
        x = T.Tensor([2.0], requires_grad=True)

        def loss():
            return T.tensor_sum(T.mul(x, x))

        T.backward(loss())
        T.backward(loss())
        assert np.allclose(x.grad, [8.0])
        T.reset_grads([x])
        assert x.grad is None

    def test_diamond_graph(self):
        # y = x*x reused twice: d/dx [x*x + x*x] = 4x
        x = T.Tensor([1.5], requires_grad=True)
        y = T.mul(x, x)
        T.backward(T.tensor_sum(T.add(y, y)))
        assert np.allclose(x.grad, [6.0])


class TestGradientChecks:
    """Central finite differences at double precision, rel err < 1e-3."""

    def test_matmul_2d(self):
        rng = T.make_rng(0)
        a, b = leaf(rng, (3, 4)), leaf(rng, (4, 2))
        check_gradients(lambda: T.tensor_sum(T.mul(T.matmul(a, b), T.matmul(a, b))), [a, b])

    def test_matmul_batched(self):
        rng = T.make_rng(1)
        a, b = leaf(rng, (2, 3, 4)), leaf(rng, (4, 5))
        check_gradients(lambda: T.tensor_sum(T.matmul(a, b)), [a, b])
        c, d = leaf(rng, (2, 2, 3, 3)), leaf(rng, (2, 2, 3, 3))
        check_gradients(lambda: T.tensor_sum(T.mul(T.matmul(c, d), T.matmul(c, d))), [c, d])

    def test_elementwise_ops(self):
        rng = T.make_rng(2)
        a, b = leaf(rng, (4, 5)), leaf(rng, (4, 5))
        check_gradients(lambda: T.tensor_sum(T.mul(T.add(a, b), T.sub(a, b))), [a, b])
        check_gradients(lambda: T.tensor_sum(T.scale(T.mul(a, b), -1.7)), [a, b])

    def test_gelu(self):
        rng = T.make_rng(3)
        x = leaf(rng, (6, 6), scale=2.0)
        check_gradients(lambda: T.tensor_sum(T.gelu(x)), [x])

    def test_softmax(self):
        rng = T.make_rng(4)
        x = leaf(rng, (3, 7), scale=3.0)
        w = T.Tensor(T.make_rng(5).standard_normal((3, 7)), dtype=np.float64)
        check_gradients(lambda: T.tensor_sum(T.mul(T.softmax(x, axis=1), w)), [x])

    def test_layer_norm(self):
        rng = T.make_rng(6)
        x, g, b = leaf(rng, (4, 8), scale=2.0), leaf(rng, (8,)), leaf(rng, (8,))
        w = T.Tensor(T.make_rng(7).standard_normal((4, 8)), dtype=np.float64)
        check_gradients(lambda: T.tensor_sum(T.mul(T.layer_norm(x, g, b), w)), [x, g, b])

    def test_cross_entropy(self):
        rng = T.make_rng(8)
        logits = leaf(rng, (5, 6), scale=2.0)
        labels = T.make_rng(9).integers(0, 6, size=5)
        check_gradients(lambda: T.cross_entropy(logits, labels), [logits])

    def test_shape_plumbing(self):
        rng = T.make_rng(10)
        x = leaf(rng, (2, 3, 4))
        w = T.Tensor(T.make_rng(11).standard_normal((4, 3, 2)), dtype=np.float64)
        check_gradients(
            lambda: T.tensor_sum(T.mul(T.transpose(x, (2, 1, 0)), w)), [x]
        )
        check_gradients(lambda: T.tensor_sum(T.mul(T.reshape(x, (6, 4)),
                                                   T.reshape(w, (6, 4)))), [x])
        y = leaf(rng, (1, 3, 1))
        wy = T.Tensor(T.make_rng(12).standard_normal((2, 3, 5)), dtype=np.float64)
        check_gradients(lambda: T.tensor_sum(T.mul(T.broadcast_to(y, (2, 3, 5)), wy)), [y])
        a, b = leaf(rng, (2, 2)), leaf(rng, (3, 2))
        wc = T.Tensor(T.make_rng(13).standard_normal((5, 2)), dtype=np.float64)
        check_gradients(lambda: T.tensor_sum(T.mul(T.concat([a, b], axis=0), wc)), [a, b])
        check_gradients(lambda: T.tensor_sum(T.slice_axis(x, 1, 1, 3)), [x])
        check_gradients(lambda: T.tensor_mean(T.mul(x, x)), [x])


def test_matmul_triple_loop_oracle_batch():
    rng = T.make_rng(20)
    for _ in range(5):
        m, k, n = rng.integers(1, 6, size=3)
        a = rng.standard_normal((m, k))
        b = rng.standard_normal((k, n))
        expect = np.zeros((m, n))
        for i in range(m):
            for j in range(n):
                for q in range(k):
                    expect[i, j] += a[i, q] * b[q, j]
        got = T.matmul(T.Tensor(a, dtype=np.float64), T.Tensor(b, dtype=np.float64)).nd
        assert np.allclose(got, expect, atol=1e-12)
