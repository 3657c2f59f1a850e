"""Gradient-tape core: forward values, adjoints, and the checking harness."""

import numpy as np
import pytest

from artinv import autodiff as ad
from artinv.autodiff import Tensor
from artinv.errors import NumericalError


def central_diff(f, x, step=1e-6):
    """Independent finite-difference oracle: df/dx per coordinate of x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        grad.reshape(-1)[i] = (hi - lo) / (2 * step)
    return grad


def correlate_oracle(signal, kernel, pad):
    """Brute-force sliding window over the zero-padded input, no flip."""
    padded = [0.0] * pad + list(signal) + [0.0] * pad
    k = len(kernel)
    out = []
    for t in range(len(padded) - k + 1):
        out.append(sum(padded[t + j] * kernel[j] for j in range(k)))
    return out


class TestForward:
    def test_matmul_hand_checked(self):
        y = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(y.data, [[3.0], [7.0]])

    def test_softmax_symmetry(self):
        y = ad.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(y.data, [1 / 3, 1 / 3, 1 / 3], rtol=0, atol=1e-15)

    def test_softmax_rows_normalized(self):
        rng = np.random.default_rng(7)
        y = ad.softmax(Tensor(rng.normal(size=(11, 23)) * 5.0))
        assert np.all(y.data >= 0)
        np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, rtol=0, atol=1e-12)

    def test_cross_correlation_matches_sliding_oracle(self):
        signal = [1.0, 2.0, 3.0, 4.0]
        kernel = [1.0, 0.0, -1.0]
        expected = correlate_oracle(signal, kernel, pad=1)
        assert expected == [-2.0, -2.0, -2.0, 3.0]
        x = Tensor(np.array(signal).reshape(4, 1))
        w = Tensor(np.array(kernel).reshape(1, 1, 3))
        y = ad.conv1d(x, w, Tensor(np.zeros(1)), padding="same")
        np.testing.assert_allclose(y.data[:, 0], expected, rtol=0, atol=0)

    def test_cross_correlation_random_vs_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            n = int(rng.integers(3, 12))
            k = int(rng.integers(1, 4)) * 2 + 1
            pad = (k - 1) // 2
            signal = rng.normal(size=n)
            kernel = rng.normal(size=k)
            expected = correlate_oracle(signal, kernel, pad)
            y = ad.conv1d(Tensor(signal.reshape(-1, 1)), Tensor(kernel.reshape(1, 1, -1)))
            np.testing.assert_allclose(y.data[:, 0], expected, atol=1e-10, rtol=0)

    def test_shape_mismatch_names_op_and_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        with pytest.raises(ad.ShapeError, match="add"):
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_determinism_bitwise(self):
        def run():
            rng = np.random.default_rng(11)
            x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
            w = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
            loss = ad.tsum(ad.square(ad.tanh(ad.matmul(x, w))))
            loss.backward()
            return loss.data.copy(), x.grad.copy(), w.grad.copy()

        first, second = run(), run()
        for a, b in zip(first, second):
            assert np.array_equal(a, b)


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        ad.tsum(ad.mul(x, x)).backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_constant_loss_leaves_zero_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = Tensor(5.0)
        loss.backward()
        assert x.grad is None  # untouched: loss does not depend on x

    def test_matmul_grads_match_finite_differences(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))

        ta = Tensor(a, requires_grad=True)
        tb = Tensor(b, requires_grad=True)
        ad.tsum(ad.matmul(ta, tb)).backward()

        ga = central_diff(lambda m: float((m @ b).sum()), a)
        gb = central_diff(lambda m: float((a @ m).sum()), b)
        np.testing.assert_allclose(ta.grad, ga, rtol=1e-7, atol=1e-7)
        np.testing.assert_allclose(tb.grad, gb, rtol=1e-7, atol=1e-7)

    def test_accumulation_over_two_branches(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        ad.add(ad.tsum(ad.square(x)), ad.tsum(ad.mul(x, 3.0))).backward()

        a = Tensor(x.data.copy(), requires_grad=True)
        ad.tsum(ad.square(a)).backward()
        b = Tensor(x.data.copy(), requires_grad=True)
        ad.tsum(ad.mul(b, 3.0)).backward()

        np.testing.assert_array_equal(x.grad, a.grad + b.grad)

    def test_backward_rejects_non_scalar(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ad.ShapeError, match="scalar"):
            ad.mul(x, 2.0).backward()

    def test_repeated_use_of_same_tensor(self):
        x = Tensor([2.0], requires_grad=True)
        ad.tsum(ad.mul(x, x)).backward()
        np.testing.assert_array_equal(x.grad, [4.0])


class TestGradCheck:
    def test_quadratic_is_nearly_exact(self):
        err = ad.grad_check(lambda x: ad.tsum(ad.square(x)), Tensor([1.0, 2.0, 3.0]), step=1e-6)
        assert err < 1e-7

    def test_sigmoid_sum(self):
        rng = np.random.default_rng(1)
        err = ad.grad_check(lambda x: ad.tsum(ad.sigmoid(x)), Tensor(rng.normal(size=8)), step=1e-6)
        assert err < 1e-6

    def test_softmax_sum_has_zero_gradient(self):
        # softmax rows sum to one, so d(sum)/dx vanishes identically
        x = Tensor(np.array([0.3, -1.2, 2.0, 0.0]), requires_grad=True)
        ad.tsum(ad.softmax(x)).backward()
        np.testing.assert_allclose(x.grad, 0.0, atol=1e-12)

    def test_step_bounds(self):
        with pytest.raises(ValueError):
            ad.grad_check(lambda x: ad.tsum(x), Tensor([1.0]), step=0.5)

    def test_non_finite_reports_coordinate(self):
        with np.errstate(invalid="ignore"):
            with pytest.raises(NumericalError, match="coordinate"):
                ad.grad_check(lambda x: ad.tsum(ad.sqrt(x)), Tensor([-1.0]), step=1e-6)


def _weighted(op):
    """Reduce an op output to a scalar with fixed weights so no gradient is
    structurally zero (plain sums hide softmax/normalization errors)."""
    def wrap(builder):
        def f(x):
            y = builder(x)
            w = Tensor(np.linspace(0.5, 1.5, y.data.size).reshape(y.data.shape))
            return ad.tsum(ad.mul(y, w))
        return f
    return wrap(op)


PRIMITIVES = {
    "add": lambda x: ad.add(x, Tensor(np.linspace(-1, 1, x.data.size).reshape(x.data.shape))),
    "sub": lambda x: ad.sub(Tensor(np.ones_like(x.data)), x),
    "mul": lambda x: ad.mul(x, Tensor(np.linspace(0.5, 2, x.data.size).reshape(x.data.shape))),
    "div": lambda x: ad.div(x, Tensor(np.linspace(1.0, 2.0, x.data.size).reshape(x.data.shape))),
    "div_rhs": lambda x: ad.div(Tensor(np.ones_like(x.data)), ad.add(ad.square(x), 1.0)),
    "matmul": lambda x: ad.matmul(x, Tensor(np.linspace(-1, 1, 12).reshape(4, 3))),
    "conv1d": lambda x: ad.conv1d(x, Tensor(np.linspace(-1, 1, 6).reshape(1, 2, 3)), Tensor(np.array([0.1]))),
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
    "relu_shifted": lambda x: ad.relu(ad.add(x, 0.05)),  # keep away from the kink
    "softmax": ad.softmax,
    "square": ad.square,
    "sqrt_pos": lambda x: ad.sqrt(ad.add(ad.square(x), 0.5)),
    "mean": lambda x: ad.tmean(x, axis=-1, keepdims=True),
    "sum_axis": lambda x: ad.tsum(x, axis=0),
    "concat": lambda x: ad.concat([x, ad.square(x)], axis=-1),
    "narrow": lambda x: ad.narrow(x, 1, 1, 3),
    "transpose": ad.transpose,
    "flip": lambda x: ad.flip(x, axis=0),
    "broadcast": lambda x: ad.broadcast_to(ad.narrow(x, 0, 0, 1), x.data.shape),
    "reshape": lambda x: ad.reshape(x, (x.data.size,)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    """Every primitive passes grad_check at 10 random points (module invariant)."""
    op = PRIMITIVES[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    shape = (5, 2) if name == "conv1d" else (3, 4)
    for _ in range(10):
        point = Tensor(rng.normal(size=shape))
        err = ad.grad_check(_weighted(op), point, step=1e-6)
        assert err < 1e-5, f"{name}: relative error {err}"


def test_no_grad_suppresses_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.tsum(ad.square(x))
    assert not y.requires_grad
    y.backward()
    assert x.grad is None


def test_check_gradients_helper_on_composite():
    rng = np.random.default_rng(5)
    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    x = rng.normal(size=(5, 4))

    def build():
        return ad.tsum(ad.square(ad.tanh(ad.add(ad.matmul(Tensor(x), w), b))))

    assert ad.check_gradients(build, [w, b], step=1e-6) < 1e-6
