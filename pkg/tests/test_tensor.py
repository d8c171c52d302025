import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trep import tensor as T
from trep.errors import ConfigError, NumericError, ShapeError

from conftest import check_gradients, finite_difference, max_rel_err


def p(rng, *shape):
    return T.Tensor(rng.uniform(-2.0, 2.0, shape), requires_grad=True)


# ---------------------------------------------------------------------------
# forward values


def test_conv1d_zero_input_gives_bias(rng):
    w = p(rng, 4, 3, 3)
    b = T.Tensor([1.0, -2.0, 0.5, 3.0])
    out = T.conv1d(T.Tensor(np.zeros((2, 3, 7))), w, b, dilation=1, padding=1)
    for c in range(4):
        assert np.allclose(out.data[:, c, :], b.data[c])


def test_conv1d_identity_kernel(rng):
    x = p(rng, 2, 3, 9)
    w = np.zeros((3, 3, 1))
    for c in range(3):
        w[c, c, 0] = 1.0
    out = T.conv1d(x, T.Tensor(w))
    assert np.array_equal(out.data, x.data)


def test_conv1d_matches_nested_loop_oracle(rng):
    x = rng.standard_normal((1, 2, 5))
    w = rng.standard_normal((3, 2, 3))
    b = rng.standard_normal(3)
    dilation, pad = 2, 4
    out = T.conv1d(T.Tensor(x), T.Tensor(w), T.Tensor(b), dilation=dilation, padding=pad).data

    xp = np.zeros((1, 2, 5 + 2 * pad))
    xp[:, :, pad:pad + 5] = x
    lout = xp.shape[2] - dilation * (3 - 1)
    expected = np.zeros((1, 3, lout))
    for co in range(3):
        for l in range(lout):
            acc = b[co]
            for ci in range(2):
                for kk in range(3):
                    acc += w[co, ci, kk] * xp[0, ci, l + kk * dilation]
            expected[0, co, l] = acc
    assert np.max(np.abs(out - expected)) < 1e-12


def test_conv1d_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv1d(T.Tensor(np.zeros((1, 2, 5))), T.Tensor(np.zeros((3, 4, 3))))


def test_gelu_and_sigmoid_points():
    assert T.gelu(T.Tensor([0.0])).data[0] == 0.0
    assert T.sigmoid(T.Tensor([0.0])).data[0] == 0.5


def test_gelu_gradient_tight():
    x = T.Tensor([0.7], requires_grad=True)
    T.backward(T.tsum(T.gelu(x)))
    h = 1e-5

    def g(v):
        from scipy.special import erf
        return v * 0.5 * (1 + erf(v / np.sqrt(2)))

    fd = (g(0.7 + h) - g(0.7 - h)) / (2 * h)
    assert abs(x.grad[0] - fd) / abs(fd) < 1e-6


def test_matmul_identity(rng):
    b = rng.standard_normal((4, 3))
    out = T.matmul(T.Tensor(np.eye(4)), T.Tensor(b))
    assert np.array_equal(out.data, b)


def test_maxpool_values_and_partial_window():
    out = T.maxpool1d(T.Tensor(np.array([[[1.0, 2.0, 3.0, 4.0]]])), 2)
    assert np.array_equal(out.data, [[[2.0, 4.0]]])
    out = T.maxpool1d(T.Tensor(np.array([[[1.0, 5.0, 3.0]]])), 2)
    assert np.array_equal(out.data, [[[5.0, 3.0]]])


@given(l=st.integers(1, 40), k=st.integers(1, 9))
@settings(max_examples=60, deadline=None)
def test_pool_output_lengths(l, k):
    x = T.Tensor(np.arange(float(l))[None, None, :])
    expected = -(-l // k)
    assert T.maxpool1d(x, k).shape == (1, 1, expected)
    assert T.avgpool1d(x, k).shape == (1, 1, expected)


def test_maxpool_backward_first_index_on_ties():
    x = T.Tensor(np.array([[[2.0, 2.0, 1.0, 3.0]]]), requires_grad=True)
    T.backward(T.tsum(T.maxpool1d(x, 2)))
    assert np.array_equal(x.grad, [[[1.0, 0.0, 0.0, 1.0]]])


def test_maxpool_kernel_error():
    with pytest.raises(ConfigError):
        T.maxpool1d(T.Tensor(np.zeros((1, 1, 4))), 0)


def test_avgpool_keeps_simplex_rows(rng):
    raw = rng.random((1, 4, 11))
    raw /= raw.sum(axis=1, keepdims=True)  # simplex along channel axis
    pooled = T.avgpool1d(T.Tensor(raw), 2).data
    assert np.allclose(pooled.sum(axis=1), 1.0, atol=1e-12)


def test_log_domain_error():
    with pytest.raises(NumericError, match="log domain"):
        T.log(T.Tensor([1.0, -0.5]))


def test_exp_overflow_error():
    with pytest.raises(NumericError, match="exp overflow"):
        T.exp(T.Tensor([800.0]))


def test_elementwise_dispatch():
    out = T.elementwise("add", T.Tensor([1.0]), T.Tensor([2.0]))
    assert out.data[0] == 3.0
    with pytest.raises(ConfigError):
        T.elementwise("pow", T.Tensor([1.0]))


def test_binary_shape_policy(rng):
    a, b = p(rng, 3, 2), p(rng, 2, 3)
    with pytest.raises(ShapeError):
        T.add(a, b)
    out = T.mul(p(rng, 3, 2), T.Tensor(2.0))  # scalar broadcast allowed
    assert out.shape == (3, 2)


# ---------------------------------------------------------------------------
# backward contract


def test_backward_quadratic():
    w = T.Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.tsum(T.mul(w, w)))
    assert np.array_equal(w.grad, [2.0, 4.0])


def test_backward_accumulates_without_zeroing():
    w = T.Tensor([1.0, 2.0], requires_grad=True)
    loss = T.tsum(T.mul(w, w))
    T.backward(loss)
    T.backward(loss)
    assert np.array_equal(w.grad, [4.0, 8.0])


def test_detached_tensor_gets_no_grad():
    w = T.Tensor([1.0, 2.0], requires_grad=True)
    d = w.detach()
    T.backward(T.tsum(T.mul(d, w)))
    assert d.grad is None
    assert np.array_equal(w.grad, [1.0, 2.0])


def test_backward_rejects_non_scalar():
    w = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        T.backward(T.mul(w, w))


def test_no_grad_suppresses_tape():
    w = T.Tensor([1.0], requires_grad=True)
    with T.no_grad():
        out = T.mul(w, w)
    assert not out.requires_grad


# ---------------------------------------------------------------------------
# finite differences for every differentiable op on random inputs in [-2, 2]


def test_fd_elementwise_binary(rng):
    a, b = p(rng, 3, 4), p(rng, 3, 4)
    s = p(rng, 1)
    check_gradients(lambda: T.tsum(T.mul(T.add(a, b), T.sub(a, b))), {"a": a, "b": b})
    check_gradients(lambda: T.tsum(T.mul(a, T.broadcast_to(s, a.shape))), {"a": a, "s": s})
    check_gradients(lambda: T.tsum(T.scalar_mul(a, -1.7)), {"a": a})


def test_fd_unary(rng):
    x = p(rng, 2, 5)
    check_gradients(lambda: T.tsum(T.gelu(x)), {"x": x})
    check_gradients(lambda: T.tsum(T.sigmoid(x)), {"x": x})
    check_gradients(lambda: T.tsum(T.sin(x)), {"x": x})
    check_gradients(lambda: T.tsum(T.exp(x)), {"x": x})
    shifted = T.Tensor(rng.uniform(0.5, 2.5, (2, 5)), requires_grad=True)
    check_gradients(lambda: T.tsum(T.log(shifted)), {"x": shifted})
    check_gradients(lambda: T.tsum(T.reciprocal(shifted)), {"x": shifted})
    away = T.Tensor(rng.uniform(-2, 2, (2, 5)) + 0.01, requires_grad=True)
    check_gradients(lambda: T.tsum(T.relu(away)), {"x": away})
    check_gradients(lambda: T.tsum(T.clamp_min(away, 0.5)), {"x": away})


def test_fd_matmul_and_linear(rng):
    a, b = p(rng, 3, 4), p(rng, 4, 2)
    check_gradients(lambda: T.tsum(T.mul(T.matmul(a, b), T.matmul(a, b))), {"a": a, "b": b})
    a3, b3 = p(rng, 2, 3, 4), p(rng, 2, 4, 3)
    check_gradients(lambda: T.tsum(T.matmul(a3, b3)), {"a": a3, "b": b3})
    x, w, bias = p(rng, 5, 3), p(rng, 3, 2), p(rng, 2)
    check_gradients(lambda: T.tsum(T.mul(T.linear(x, w, bias), T.linear(x, w, bias))),
                    {"x": x, "w": w, "b": bias})


@pytest.mark.parametrize("dilation,padding", [(1, 0), (1, 1), (2, 2), (3, 6)])
def test_fd_conv1d(rng, dilation, padding):
    x, w, b = p(rng, 2, 3, 12), p(rng, 4, 3, 3), p(rng, 4)
    check_gradients(
        lambda: T.tsum(T.mul(T.conv1d(x, w, b, dilation, padding),
                             T.conv1d(x, w, b, dilation, padding))),
        {"x": x, "w": w, "b": b})


def test_fd_pools(rng):
    x = p(rng, 2, 3, 7)
    check_gradients(lambda: T.tsum(T.mul(T.maxpool1d(x, 2), T.maxpool1d(x, 2))), {"x": x})
    check_gradients(lambda: T.tsum(T.mul(T.avgpool1d(x, 3), T.avgpool1d(x, 3))), {"x": x})


def test_fd_structure_ops(rng):
    x = p(rng, 2, 3, 4)
    y = p(rng, 2, 1, 4)
    check_gradients(lambda: T.tsum(T.mul(T.transpose(x, (2, 0, 1)), T.transpose(x, (2, 0, 1)))),
                    {"x": x})
    check_gradients(lambda: T.tsum(T.mul(T.reshape(x, (6, 4)), T.reshape(x, (6, 4)))), {"x": x})
    check_gradients(lambda: T.tsum(T.mul(T.concat([x, y], 1), T.concat([x, y], 1))),
                    {"x": x, "y": y})
    check_gradients(lambda: T.tsum(T.mul(T.narrow(x, 2, 1, 2), T.narrow(x, 2, 1, 2))), {"x": x})
    check_gradients(lambda: T.tsum(T.mul(T.broadcast_to(y, (2, 3, 4)), x)), {"x": x, "y": y})
    check_gradients(lambda: T.tsum(T.tsum(x, axis=1, keepdims=True)), {"x": x})
    check_gradients(lambda: T.tmean(T.mul(x, x)), {"x": x})


def test_fd_gathers(rng):
    x = p(rng, 3, 5, 4)
    tau = p(rng, 5, 4)
    bi = np.array([0, 2, 1, 1])
    ti = np.array([4, 0, 3, 3])
    check_gradients(lambda: T.tsum(T.mul(T.gather_bt(x, bi, ti), T.gather_bt(x, bi, ti))),
                    {"x": x})
    check_gradients(lambda: T.tsum(T.mul(T.gather_rows(tau, ti), T.gather_rows(tau, ti))),
                    {"tau": tau})


# ---------------------------------------------------------------------------
# optimizer


def test_adam_zero_gradient_leaves_params():
    w = T.Tensor([1.0, -2.0], requires_grad=True)
    w.grad = np.zeros(2)
    before = w.data.copy()
    T.adam_step({"w": w}, T.AdamState(lr=0.1))
    assert np.array_equal(w.data, before)


def test_adam_unit_step_on_quadratic():
    # f(w) = w^2 at w=1: first bias-corrected step is lr * m / sqrt(v) = lr.
    w = T.Tensor([1.0], requires_grad=True)
    T.backward(T.tsum(T.mul(w, w)))
    T.adam_step({"w": w}, T.AdamState(lr=0.1))
    assert abs(w.data[0] - 0.9) < 1e-8


def test_adam_deterministic_updates(rng):
    g = rng.standard_normal(4)
    results = []
    for _ in range(2):
        w = T.Tensor(np.arange(4.0), requires_grad=True)
        state = T.AdamState(lr=0.01)
        for _ in range(3):
            w.grad = g.copy()
            T.adam_step({"w": w}, state)
        results.append(w.data.copy())
    assert np.array_equal(results[0], results[1])


def test_adam_rejects_nan_gradient():
    w = T.Tensor([1.0], requires_grad=True)
    w.grad = np.array([np.nan])
    with pytest.raises(NumericError):
        T.adam_step({"w": w}, T.AdamState())


def test_adam_skips_missing_grads():
    w = T.Tensor([3.0], requires_grad=True)
    T.adam_step({"w": w}, T.AdamState(lr=0.5))
    assert w.data[0] == 3.0


# ---------------------------------------------------------------------------
# determinism


def test_ops_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(7)
        x = T.Tensor(rng.standard_normal((2, 3, 8)), requires_grad=True)
        w = T.Tensor(rng.standard_normal((4, 3, 3)), requires_grad=True)
        out = T.gelu(T.conv1d(x, w, dilation=2, padding=2))
        loss = T.tmean(T.mul(out, out))
        T.backward(loss)
        return loss.item(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)
