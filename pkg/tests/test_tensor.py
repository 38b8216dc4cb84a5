import numpy as np
import pytest

from attnloop import tensor as tt
from attnloop.tensor import Tensor, backward, no_grad


def numeric_grad(fn, x, h=1e-6):
    """Central-difference gradient of a scalar fn of one flat array."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.ravel()
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = h
        g.ravel()[i] = (fn((flat + bump).reshape(x.shape))
                        - fn((flat - bump).reshape(x.shape))) / (2 * h)
    return g


def check_op(build, x0, tol=1e-6):
    """Compare autodiff gradient of sum(build(x)) with central differences."""
    x = Tensor(x0, requires_grad=True)
    out = build(x).sum()
    (g,) = backward(out, [x])

    def scalar(v):
        with no_grad():
            return float(build(Tensor(v)).sum().data)

    g_num = numeric_grad(scalar, np.asarray(x0, dtype=np.float64))
    np.testing.assert_allclose(g.data, g_num, rtol=tol, atol=tol)


RNG = np.random.default_rng(0)
C1 = Tensor(RNG.standard_normal((3, 4)))
C2 = Tensor(RNG.standard_normal((3, 4)))
C3 = Tensor(RNG.standard_normal((3, 4)) + 3.0)


@pytest.mark.parametrize("build", [
    lambda x: x + C1,
    lambda x: x - 2.5,
    lambda x: x * C2,
    lambda x: x / C3,
    lambda x: -x,
    lambda x: tt.square(x),
    lambda x: tt.exp(x),
    lambda x: tt.tanh(x),
    lambda x: tt.sigmoid(x),
    lambda x: tt.softplus(x),
    lambda x: tt.softmax(x, axis=1),
    lambda x: x.sum(axis=0),
    lambda x: x.mean(axis=1, keepdims=True),
    lambda x: x.reshape(4, 3),
    lambda x: x.T,
    lambda x: tt.narrow(x, 1, 1, 2),
    lambda x: tt.concat([x, tt.square(x)], axis=1),
    lambda x: tt.broadcast_to(x.sum(axis=0, keepdims=True), (3, 4)),
])
def test_op_gradients_match_finite_differences(build):
    check_op(build, RNG.standard_normal((3, 4)))


def test_log_gradient():
    check_op(lambda x: tt.log(x), RNG.uniform(0.5, 2.0, (3, 4)))


def test_matmul_gradient():
    B = Tensor(RNG.standard_normal((4, 2)))
    check_op(lambda x: x @ B, RNG.standard_normal((3, 4)))
    A = Tensor(RNG.standard_normal((2, 3)))
    check_op(lambda x: A @ x, RNG.standard_normal((3, 4)))


def test_broadcasting_bias_add():
    b0 = RNG.standard_normal(4)
    x = Tensor(RNG.standard_normal((3, 4)))

    def build(b):
        return x + b

    check_op(build, b0)


def test_clip_gradient_masks_out_of_range():
    x = Tensor(np.array([-2.0, 0.5, 2.0]), requires_grad=True)
    out = tt.clip(x, -1.0, 1.0).sum()
    (g,) = backward(out, [x])
    np.testing.assert_array_equal(g.data, [0.0, 1.0, 0.0])


def test_second_order_through_backward():
    # f(x) = sum(x^3): grad = 3x^2, hessian diag = 6x
    x = Tensor(np.array([1.0, 2.0, -1.5]), requires_grad=True)
    f = (tt.square(x) * x).sum()
    (g,) = backward(f, [x])
    v = Tensor(np.array([1.0, 0.5, 2.0]))
    gv = (g * v).sum()
    (h,) = backward(gv, [x])
    np.testing.assert_allclose(h.data, 6 * x.data * v.data, rtol=1e-12)


def test_no_grad_blocks_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = tt.exp(x)
    assert not y.requires_grad and y._parents == ()


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(x * 2.0, [x])


def test_unused_leaf_gets_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    (gx, gy) = backward((x * 2.0).sum(), [x, y])
    np.testing.assert_array_equal(gy.data, np.zeros(3))
    np.testing.assert_array_equal(gx.data, 2 * np.ones(3))


def test_softmax_rows_sum_to_one():
    x = Tensor(RNG.standard_normal((5, 7)) * 10)
    s = tt.softmax(x, axis=1)
    np.testing.assert_allclose(s.data.sum(axis=1), np.ones(5), atol=1e-12)
    assert np.all(s.data >= 0)
