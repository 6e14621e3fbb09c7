import threading

import numpy as np
import pytest

from autodiff.optim import Adam, AdamState, adam_step
from autodiff.tensor import (Tensor, backward, concat, default_dtype, gather, log_sum_exp, no_grad,
                             numerical_gradient, pick, softplus)
from nets.mlp import Mlp
from objectives.losses import cross_entropy_loss
from utils.errors import ConfigurationError, NumericError, UsageError


def _sample(rng, shape, positive):
    if positive:
        return rng.uniform(0.5, 2.0, size=shape)
    # 0 付近を避ける（relu の折れ目）
    values = rng.standard_normal(shape)
    return np.sign(values) * (0.2 + np.abs(values))


# 名前: (関数, 入力形状, 正の入力のみ)
GRADIENT_CASES = {
    'add': (lambda a, b: a + b, [(3, 4), (4,)], False),
    'sub': (lambda a, b: a - b, [(3, 4), (3, 1)], False),
    'mul': (lambda a, b: a * b, [(3, 4), (4,)], False),
    'div': (lambda a, b: a / b, [(3, 4), (3, 4)], True),
    'neg': (lambda a: -a, [(3, 4)], False),
    'pow': (lambda a: a ** 3.0, [(3, 4)], False),
    'pow_fractional': (lambda a: a ** 0.5, [(3, 4)], True),
    'matmul': (lambda a, b: a @ b, [(3, 4), (4, 2)], False),
    'exp': (lambda a: a.exp(), [(3, 4)], False),
    'log': (lambda a: a.log(), [(3, 4)], True),
    'tanh': (lambda a: a.tanh(), [(3, 4)], False),
    'relu': (lambda a: a.relu(), [(3, 4)], False),
    'sigmoid': (lambda a: a.sigmoid(), [(3, 4)], False),
    'softplus': (lambda a: a.softplus(), [(3, 4)], False),
    'sqrt': (lambda a: a.sqrt(), [(3, 4)], True),
    'sum': (lambda a: a.sum(axis=0, keepdims=True), [(3, 4)], False),
    'mean': (lambda a: a.mean(axis=1), [(3, 4)], False),
    'logsumexp': (lambda a: a.logsumexp(axis=1), [(3, 4)], False),
    'log_softmax': (lambda a: a.log_softmax(axis=1), [(3, 4)], False),
    'reshape': (lambda a: a.reshape(2, 6), [(3, 4)], False),
    'transpose': (lambda a: a.T, [(3, 4)], False),
    'getitem': (lambda a: a[1:, ::2], [(3, 4)], False),
    'gather': (lambda a: gather(a, [0, 2, 0]), [(3, 4)], False),
    'pick': (lambda a: pick(a, [1, 0, 3]), [(3, 4)], False),
    'concat': (lambda a, b: concat([a, b], axis=1), [(3, 2), (3, 4)], False),
}


class TestPrimitives:

    def test_softplus_at_zero(self):
        assert softplus(Tensor(0.0)).item() == pytest.approx(np.log(2.0), abs=1e-12)

    def test_softplus_is_linear_above_threshold(self):
        assert softplus(Tensor(40.0)).item() == 40.0

    def test_matmul_with_identity(self):
        v = Tensor([3.0, -1.5])
        np.testing.assert_array_equal((Tensor(np.eye(2)) @ v).data, v.data)

    def test_log_sum_exp_is_shift_stable(self):
        value = log_sum_exp(Tensor([1000.0, 1000.0])).item()
        assert value == pytest.approx(1000.0 + np.log(2.0), abs=1e-9)

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(ConfigurationError, match=r"\(2, 3\)"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
        with pytest.raises(ConfigurationError):
            Tensor(np.ones(3)) + Tensor(np.ones(4))

    def test_log_of_non_positive_is_numeric_error(self):
        with pytest.raises(NumericError):
            Tensor([1.0, 0.0]).log()

    def test_concat_and_gather(self):
        a = Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
        b = Tensor(np.ones((1, 2)), requires_grad=True)
        joined = concat([a, b], axis=0)
        assert joined.shape == (3, 2)
        rows = gather(joined, [2, 0, 2])
        rows.sum().backward()
        np.testing.assert_array_equal(a.grad, [[1.0, 1.0], [0.0, 0.0]])
        np.testing.assert_array_equal(b.grad, [[2.0, 2.0]])

    def test_pick_selects_one_per_row(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(pick(a, [1, 0]).data, [2.0, 3.0])

    def test_float32_mode(self):
        with default_dtype(np.float32):
            assert Tensor([1.0]).data.dtype == np.float32
        assert Tensor([1.0]).data.dtype == np.float64


class TestBackward:

    def test_square_gradient(self):
        x = Tensor(3.0, requires_grad=True)
        (x * x).backward()
        assert x.grad == pytest.approx(6.0)

    def test_softplus_gradient_at_zero(self):
        x = Tensor(0.0, requires_grad=True)
        softplus(x).backward()
        assert x.grad == pytest.approx(0.5)

    def test_non_scalar_loss_is_usage_error(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(UsageError):
            backward(x * 2.0)

    def test_shared_node_accumulates_once_per_path(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * 3.0
        (y + y * y).backward()
        # d/dx (3x + 9x²) = 3 + 18x
        assert x.grad == pytest.approx(39.0)

    def test_returns_requested_gradients(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        unused = Tensor([5.0], requires_grad=True)
        grads = backward((x * x).sum(), [x, unused])
        np.testing.assert_allclose(grads[0], [2.0, 4.0])
        np.testing.assert_array_equal(grads[1], [0.0])

    def test_no_grad_records_nothing(self):
        x = Tensor(1.0, requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_mlp_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        net = Mlp([3, 4, 2], activations=['tanh', 'linear'], seed=5)
        x = rng.standard_normal((6, 3))
        y = rng.integers(0, 2, size=6)
        weight = net.weights[0]

        loss = cross_entropy_loss(net(x), y)
        (analytic,) = backward(loss, [weight])

        def loss_at(w):
            saved = weight.data.copy()
            weight.data[...] = w
            with no_grad():
                value = cross_entropy_loss(net(x), y).item()
            weight.data[...] = saved
            return value

        numeric = numerical_gradient(loss_at, weight.data.copy(), step=1e-5)
        relative = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
        assert relative < 1e-4

    @pytest.mark.parametrize('fn, shapes, positive', list(GRADIENT_CASES.values()), ids=list(GRADIENT_CASES))
    def test_primitive_matches_central_differences(self, fn, shapes, positive):
        rng = np.random.default_rng(11)
        inputs = [_sample(rng, shape, positive) for shape in shapes]
        weights = rng.standard_normal(fn(*[Tensor(x) for x in inputs]).shape)

        tensors = [Tensor(x, requires_grad=True) for x in inputs]
        analytic = backward((fn(*tensors) * weights).sum(), tensors)

        for i, x in enumerate(inputs):
            def loss_at(value, i=i):
                args = [Tensor(value if j == i else other) for j, other in enumerate(inputs)]
                return (fn(*args) * weights).sum().item()

            np.testing.assert_allclose(analytic[i], numerical_gradient(loss_at, x), rtol=1e-6, atol=1e-8)

    def test_adjoint_is_linear_in_the_seed(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2)), requires_grad=True)

        def outputs():
            hidden = (x @ w).tanh()
            return hidden.exp().sum(), hidden.logsumexp(axis=1).sum()

        first, second = outputs()
        grads_first = backward(first, [x, w])
        grads_second = backward(second, [x, w])
        first, second = outputs()
        combined = backward(2.5 * first - 0.75 * second, [x, w])
        for c, g1, g2 in zip(combined, grads_first, grads_second):
            np.testing.assert_allclose(c, 2.5 * g1 - 0.75 * g2, rtol=1e-10, atol=1e-12)

    def test_no_grad_is_per_thread(self):
        x = Tensor(1.0, requires_grad=True)
        seen = {}

        def worker():
            seen['requires_grad'] = (x * 2.0).requires_grad

        with no_grad():
            thread = threading.Thread(target=worker)
            thread.start()
            thread.join()
            assert not (x * 2.0).requires_grad
        assert seen['requires_grad'] is True


class TestAdam:

    def test_first_step_moves_by_learning_rate(self):
        w = Tensor([0.0], requires_grad=True)
        state = AdamState(lr=1e-3)
        adam_step({'w': w}, {'w': np.ones(1)}, state)
        assert w.data[0] == pytest.approx(-1e-3, rel=1e-6)
        assert state.step == 1

    def test_zero_gradient_leaves_parameters(self):
        w = Tensor([1.0, -2.0], requires_grad=True)
        state = AdamState()
        adam_step({'w': w}, {'w': None}, state)
        np.testing.assert_array_equal(w.data, [1.0, -2.0])
        np.testing.assert_array_equal(state.m['w'], [0.0, 0.0])

    def test_constant_gradient_moves_against_sign(self):
        w = Tensor([0.0, 0.0], requires_grad=True)
        optimizer = Adam({'w': w}, lr=1e-2)
        for _ in range(50):
            w.grad = np.array([2.0, -0.5])
            optimizer.step()
        assert w.data[0] < 0 < w.data[1]

    def test_invalid_hyperparameters(self):
        with pytest.raises(ConfigurationError):
            AdamState(lr=0.0)
        with pytest.raises(ConfigurationError):
            AdamState(beta1=1.0)

    def test_gradient_shape_mismatch(self):
        w = Tensor([0.0, 0.0], requires_grad=True)
        with pytest.raises(ConfigurationError):
            adam_step({'w': w}, {'w': np.ones(3)}, AdamState())
