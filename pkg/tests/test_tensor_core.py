"""Tape mechanics and op forward values against brute-force loop oracles."""

import numpy as np
import pytest

import oracles

from catcd import ops
from catcd.autograd import Parameter, Tape, Tensor, default_dtype, no_grad
from catcd.gradcheck import grad_check, op_cases


def P(data):
    return Parameter(np.asarray(data, dtype=np.float64))


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def matmul_loop(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def shuffle_loop(x, r):
    B, C, H, W = x.shape
    c = C // (r * r)
    out = np.zeros((B, c, H * r, W * r))
    for n in range(B):
        for ch in range(C):
            oc, rem = divmod(ch, r * r)
            di, dj = divmod(rem, r)
            for i in range(H):
                for j in range(W):
                    out[n, oc, i * r + di, j * r + dj] = x[n, ch, i, j]
    return out


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

def test_sum_gradient_is_ones():
    x = P(np.arange(6.0).reshape(2, 3))
    with Tape() as tape:
        tape.backward(ops.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_square_gradient_is_2x():
    x = P([[1.5, -2.0], [0.25, 3.0]])
    with Tape() as tape:
        tape.backward(ops.sum(ops.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_fan_out_accumulates():
    # y = x*x + 3x reuses x on three paths
    x = P([0.5, -1.0, 2.0])
    with Tape() as tape:
        y = ops.add(ops.mul(x, x), ops.scale(x, 3.0))
        tape.backward(ops.sum(y))
    np.testing.assert_allclose(x.grad, 2 * x.data + 3)


def test_backward_needs_scalar():
    x = P([1.0, 2.0])
    with Tape() as tape:
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(ops.scale(x, 2.0))


def test_no_grad_records_nothing():
    x = P([1.0, 2.0])
    with Tape() as tape:
        with no_grad():
            y = ops.mul(x, x)
        assert len(tape) == 0
        assert not y.requires_grad


def test_intermediate_grads_are_freed():
    x = P([1.0, 2.0])
    with Tape() as tape:
        h = ops.mul(x, x)
        tape.backward(ops.sum(h))
    assert h.grad is None
    assert x.grad is not None
    assert len(tape) == 0


def test_dtype_follows_default():
    with default_dtype(np.float64):
        assert Tensor([1, 2]).dtype == np.float64
    assert Tensor([1, 2]).dtype == np.float32


def test_nonfinite_output_is_caught():
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
        ops.scale(Tensor(np.array([1e308, 1.0])), 1e10)


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------

def test_matmul_identity_and_zero():
    a = np.random.default_rng(0).standard_normal((3, 3))
    np.testing.assert_array_equal(ops.matmul(Tensor(a), Tensor(np.eye(3))).data, a)
    z = ops.matmul(Tensor(np.zeros((2, 4))), Tensor(np.ones((4, 3))))
    np.testing.assert_array_equal(z.data, np.zeros((2, 3)))


def test_matmul_matches_loop():
    rng = np.random.default_rng(1)
    for _ in range(5):
        a, b = rng.standard_normal((2, 2)), rng.standard_normal((2, 2))
        np.testing.assert_allclose(ops.matmul(Tensor(a), Tensor(b)).data, matmul_loop(a, b), rtol=1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ops.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_conv_identity_kernel():
    x = np.random.default_rng(2).standard_normal((1, 3, 4, 5))
    w = np.zeros((3, 3, 1, 1))
    w[0, 0] = 1.0
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3))).data
    np.testing.assert_array_equal(out[:, 0], x[:, 0])
    np.testing.assert_array_equal(out[:, 1:], 0.0)


def test_conv_zero_weights_gives_bias():
    b = np.array([0.5, -1.5])
    out = ops.conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.zeros((2, 3, 3, 3))), Tensor(b)).data
    np.testing.assert_array_equal(out, np.broadcast_to(b.reshape(1, 2, 1, 1), out.shape))


@pytest.mark.parametrize("k", [1, 3])
def test_conv_matches_nested_loops(k):
    rng = np.random.default_rng(3 + k)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((3, 2, k, k))
    b = rng.standard_normal(3)
    np.testing.assert_allclose(ops.conv2d(Tensor(x), Tensor(w), Tensor(b)).data, oracles.conv2d(x, w, b), atol=1e-6)


def test_layer_norm_cases():
    g, b = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_allclose(ops.layer_norm(Tensor(np.full((1, 4), 3.0)), g, b).data, 0.0, atol=1e-12)
    out = ops.layer_norm(Tensor(np.array([[-1.0, 1.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-5)
    row = np.random.default_rng(4).standard_normal((1, 16)) * 5 + 2
    out = ops.layer_norm(Tensor(row), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert abs(out.mean()) <= 1e-6
    assert abs(out.var() - 1.0) <= 1e-3


def test_batch_norm_train_and_eval():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 3, 5, 5)) * 2 + 1
    state = ops.BatchNormState(3, momentum=0.1, dtype=np.float64)
    g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
    out = ops.batch_norm2d(Tensor(x), g, b, state, training=True).data
    assert np.abs(out.mean(axis=(0, 2, 3))).max() <= 1e-5
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)
    # single-step recurrence from the (0, 1) init
    np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-12)
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)), rtol=1e-12)
    before = state.running_mean.copy()
    e1 = ops.batch_norm2d(Tensor(x), g, b, state, training=False).data
    e2 = ops.batch_norm2d(Tensor(x), g, b, state, training=False).data
    np.testing.assert_array_equal(e1, e2)
    np.testing.assert_array_equal(state.running_mean, before)


def test_batch_norm_eval_without_stats_raises():
    state = ops.BatchNormState(2, initialized=False)
    with pytest.raises(RuntimeError, match="running statistics"):
        ops.batch_norm2d(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, False)


def test_elementwise_limits():
    np.testing.assert_allclose(ops.softmax(Tensor(np.array([[2.0, 2.0]]))).data, [[0.5, 0.5]])
    assert ops.gelu(Tensor(np.array([0.0]))).data[0] == 0.0
    assert abs(ops.gelu(Tensor(np.array([10.0]))).data[0] - 10.0) <= 1e-4
    x = Tensor(np.random.default_rng(6).standard_normal((2, 3)))
    np.testing.assert_array_equal(ops.abs(ops.sub(x, x)).data, 0.0)


def test_pixel_shuffle_cases():
    x = np.random.default_rng(7).standard_normal((2, 8, 3, 2))
    np.testing.assert_array_equal(ops.pixel_shuffle(Tensor(x), 1).data, x)
    small = ops.pixel_shuffle(Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1)), 2).data
    np.testing.assert_array_equal(small[0, 0], [[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ops.pixel_shuffle(Tensor(x), 2).data, shuffle_loop(x, 2))
    back = ops.pixel_unshuffle(ops.pixel_shuffle(Tensor(x), 2), 2).data
    np.testing.assert_array_equal(back, x)


def test_global_avg_pool_cases():
    np.testing.assert_array_equal(ops.global_avg_pool(Tensor(np.full((1, 2, 3, 3), 4.0))).data, [[4.0, 4.0]])
    assert ops.global_avg_pool(Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))).data[0, 0] == 2.5
    x = np.random.default_rng(8).standard_normal((2, 3, 4, 5))
    oracle = np.zeros((2, 3))
    for n in range(2):
        for c in range(3):
            oracle[n, c] = sum(x[n, c, i, j] for i in range(4) for j in range(5)) / 20
    np.testing.assert_allclose(ops.global_avg_pool(Tensor(x)).data, oracle, atol=1e-6)


def test_ops_are_deterministic():
    rng = np.random.default_rng(9)
    x, w, b = rng.standard_normal((2, 4, 8, 8)), rng.standard_normal((4, 4, 3, 3)), rng.standard_normal(4)
    a1 = ops.gelu(ops.conv2d(Tensor(x), Tensor(w), Tensor(b))).data
    a2 = ops.gelu(ops.conv2d(Tensor(x), Tensor(w), Tensor(b))).data
    assert a1.tobytes() == a2.tobytes()


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("case", op_cases(), ids=lambda c: c.name)
def test_op_gradients(case):
    rep = grad_check(case.f, case.params, h=1e-3, tol=1e-4)
    assert rep.passed, "\n".join(rep.lines())


def test_gradcheck_catches_a_wrong_backward():
    from catcd.autograd import make_result

    def bad_square(x):
        return make_result(x.data ** 2, (x,), lambda g: (g * 3 * x.data,), "bad_square")

    x = P([0.3, -0.7, 1.1])
    rep = grad_check(lambda: ops.sum(bad_square(x)), [x])
    assert not rep.passed


def test_gradcheck_drops_probes_that_cross_a_kink():
    # |x| at x = 5e-4 with h = 1e-3: the stencil straddles 0
    x = P([5e-4, 0.8])
    rep = grad_check(lambda: ops.sum(ops.abs(x)), [x], h=1e-3)
    assert rep.params[0].kinks == 1
    assert rep.params[0].checked == 1
    assert rep.passed
