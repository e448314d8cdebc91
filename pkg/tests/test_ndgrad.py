import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gaitaudit import ndgrad as nd
from gaitaudit.ndgrad import Tensor

from conftest import numeric_grad, rel_error


def naive_conv1d(x, w, b, padding):
    c_in, t = x.shape
    c_out, _, k = w.shape
    xp = np.zeros((c_in, t + 2 * padding))
    xp[:, padding:padding + t] = x
    t_out = t + 2 * padding - k + 1
    out = np.zeros((c_out, t_out))
    for c in range(c_out):
        for s in range(t_out):
            acc = b[c]
            for i in range(c_in):
                for j in range(k):
                    acc += w[c, i, j] * xp[i, s + j]
            out[c, s] = acc
    return out


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=float), requires_grad=grad)


# ---------------------------------------------------------------- conv1d


def test_conv1d_identity_kernel():
    out = nd.conv1d(T([[1, 2, 3]]), T([[[1]]]), T([0]), padding=0)
    np.testing.assert_array_equal(out.data, [[1, 2, 3]])


def test_conv1d_difference_kernel_padding():
    x, w = np.array([[1.0, 2, 3]]), np.array([[[1.0, 0, -1]]])
    out = nd.conv1d(T(x), T(w), T([0]), padding=1)
    expected = naive_conv1d(x, w, np.zeros(1), 1)
    np.testing.assert_array_equal(expected, [[-2, -2, 2]])
    np.testing.assert_array_equal(out.data, expected)


def test_conv1d_zero_input_exposes_bias():
    out = nd.conv1d(T(np.zeros((1, 4))), T(np.ones((1, 1, 3))), T([5]), padding=1)
    np.testing.assert_array_equal(out.data, [[5, 5, 5, 5]])


def test_conv1d_errors():
    with pytest.raises(nd.DimensionError, match="channels"):
        nd.conv1d(T(np.zeros((2, 5))), T(np.zeros((1, 3, 3))), T([0]))
    with pytest.raises(nd.InputTooShortError):
        nd.conv1d(T(np.zeros((1, 3))), T(np.zeros((1, 1, 5))), T([0]), padding=0)


@settings(max_examples=40, deadline=None)
@given(
    c_in=st.integers(1, 3), c_out=st.integers(1, 3), k=st.integers(1, 5),
    t=st.integers(5, 12), pad=st.integers(0, 3), seed=st.integers(0, 2**16),
)
def test_conv1d_matches_loop_oracle(c_in, c_out, k, t, pad, seed):
    r = np.random.default_rng(seed)
    x, w, b = r.normal(size=(c_in, t)), r.normal(size=(c_out, c_in, k)), r.normal(size=c_out)
    out = nd.conv1d(T(x), T(w), T(b), pad)
    np.testing.assert_allclose(out.data, naive_conv1d(x, w, b, pad), rtol=0, atol=1e-12)


def test_conv1d_batched_equals_per_sample(rng):
    x, w, b = rng.normal(size=(3, 2, 10)), rng.normal(size=(4, 2, 3)), rng.normal(size=4)
    out = nd.conv1d(T(x), T(w), T(b), 1).data
    for n in range(3):
        np.testing.assert_allclose(out[n], naive_conv1d(x[n], w, b, 1), atol=1e-12)


def test_conv1d_gradients(rng):
    x, w, b = T(rng.normal(size=(2, 3, 9)), True), T(rng.normal(size=(4, 3, 5)), True), T(rng.normal(size=4), True)
    proj = rng.normal(size=(2, 4, 9))

    def f():
        return float(np.sum(nd.conv1d(x, w, b, 2).data * proj))

    loss = nd.tsum(nd.mul(nd.conv1d(x, w, b, 2), T(proj)))
    nd.backward(loss)
    for t in (x, w, b):
        assert rel_error(t.grad, numeric_grad(f, t.data)) < 1e-5


# ---------------------------------------------------------------- relu / pools


def test_relu_values_and_grad():
    np.testing.assert_array_equal(nd.relu(T([-1, 0, 2])).data, [0, 0, 2])
    pos = np.array([0.5, 3.0, 1e-3])
    np.testing.assert_array_equal(nd.relu(T(pos)).data, pos)
    x = T([-1.0, 2.0], True)
    nd.backward(nd.tsum(nd.relu(x)))
    np.testing.assert_array_equal(x.grad, [0, 1])
    np.testing.assert_allclose(numeric_grad(lambda: float(np.sum(np.maximum(x.data, 0))), x.data), [0, 1])


def test_relu_subgradient_at_zero_is_zero():
    x = T([0.0], True)
    nd.backward(nd.tsum(nd.relu(x)))
    assert x.grad[0] == 0.0


def test_maxpool_examples():
    np.testing.assert_array_equal(nd.maxpool1d(T([[1, 3, 2, 5]]), 2).data, [[3, 5]])
    np.testing.assert_array_equal(nd.maxpool1d(T([[1, 3, 2, 5, 9]]), 2).data, [[3, 5]])


def test_maxpool_tie_routes_to_first():
    x = T([[2.0, 2.0]], True)
    out = nd.maxpool1d(x, 2)
    assert out.data.tolist() == [[2.0]]
    nd.backward(nd.tsum(out))
    np.testing.assert_array_equal(x.grad, [[1.0, 0.0]])


def test_maxpool_too_short():
    with pytest.raises(nd.InputTooShortError):
        nd.maxpool1d(T([[1.0]]), 2)


@settings(max_examples=30, deadline=None)
@given(c=st.integers(1, 3), t=st.integers(2, 15), k=st.integers(1, 4), seed=st.integers(0, 2**16))
def test_maxpool_matches_loop_oracle(c, t, k, seed):
    if t // k == 0:
        return
    x = np.random.default_rng(seed).normal(size=(c, t))
    expected = np.array([[max(x[i, j * k:(j + 1) * k]) for j in range(t // k)] for i in range(c)])
    np.testing.assert_array_equal(nd.maxpool1d(T(x), k).data, expected)


def test_avgpool_values_and_grad():
    np.testing.assert_array_equal(nd.adaptive_avg_pool_to_1(T([[2, 4, 6]])).data, [4.0])
    np.testing.assert_array_equal(nd.adaptive_avg_pool_to_1(T([[7.5] * 6])).data, [7.5])
    x = T([[1.0, -2.0, 3.0, 0.5]], True)
    nd.backward(nd.tsum(nd.adaptive_avg_pool_to_1(x)))
    np.testing.assert_array_equal(x.grad, [[0.25] * 4])
    num = numeric_grad(lambda: float(np.mean(x.data)), x.data)
    np.testing.assert_allclose(num, 0.25, rtol=1e-8)


def test_pool_gradients_fd(rng):
    x = T(rng.normal(size=(2, 3, 11)), True)
    proj = rng.normal(size=(2, 3))

    def build():
        return nd.adaptive_avg_pool_to_1(nd.maxpool1d(x, 2))

    nd.backward(nd.tsum(nd.mul(build(), T(proj))))
    num = numeric_grad(lambda: float(np.sum(build().data * proj)), x.data)
    assert rel_error(x.grad, num) < 1e-5


# ---------------------------------------------------------------- linear / softmax


def test_linear_examples():
    x = np.array([0.3, -1.2, 4.0])
    np.testing.assert_array_equal(nd.linear(T(x), T(np.eye(3)), T(np.zeros(3))).data, x)
    np.testing.assert_array_equal(nd.linear(T([1, 2]), T([[3, 4]]), T([-1])).data, [10])
    np.testing.assert_array_equal(nd.linear(T([0, 0]), T([[3, 4], [1, 1]]), T([2, -7])).data, [2, -7])
    with pytest.raises(nd.DimensionError):
        nd.linear(T([1, 2, 3]), T([[3, 4]]), T([0]))


def test_linear_gradients(rng):
    x, w, b = T(rng.normal(size=(4, 5)), True), T(rng.normal(size=(3, 5)), True), T(rng.normal(size=3), True)
    proj = rng.normal(size=(4, 3))
    nd.backward(nd.tsum(nd.mul(nd.linear(x, w, b), T(proj))))
    f = lambda: float(np.sum((x.data @ w.data.T + b.data) * proj))  # noqa: E731
    for t in (x, w, b):
        assert rel_error(t.grad, numeric_grad(f, t.data)) < 1e-5


def test_softmax_examples():
    np.testing.assert_allclose(nd.softmax(T([0, 0, 0, 0])).data, [0.25] * 4, atol=1e-15)
    np.testing.assert_allclose(nd.softmax(T([0, math.log(2)])).data, [1 / 3, 2 / 3], rtol=1e-14)
    big = nd.softmax(T([1000, 0])).data
    assert np.all(np.isfinite(big))
    assert big[0] == pytest.approx(1.0) and big[1] < 1e-300


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
def test_softmax_on_simplex(e):
    a = nd.softmax(T(e)).data
    assert np.all(a >= 0)
    assert abs(a.sum() - 1.0) <= 1e-12


def test_softmax_jacobian(rng):
    e = T(rng.normal(size=(3, 4)), True)
    proj = rng.normal(size=(3, 4))

    def f():
        z = np.exp(e.data - e.data.max(axis=-1, keepdims=True))
        return float(np.sum(z / z.sum(axis=-1, keepdims=True) * proj))

    nd.backward(nd.tsum(nd.mul(nd.softmax(e), T(proj))))
    assert rel_error(e.grad, numeric_grad(f, e.data)) < 1e-5


def test_softmax_mask_gives_exact_zero():
    a = nd.softmax(T([1.0, 5.0, 2.0]), mask=np.array([True, False, True])).data
    assert a[1] == 0.0
    np.testing.assert_allclose(a[[0, 2]], nd.softmax(T([1.0, 2.0])).data, rtol=1e-15)


def test_weighted_sum_gradients(rng):
    a, v = T(rng.random(size=(2, 4)), True), T(rng.normal(size=(2, 4, 3)), True)
    proj = rng.normal(size=(2, 3))
    nd.backward(nd.tsum(nd.mul(nd.weighted_sum(a, v), T(proj))))
    f = lambda: float(np.sum(np.einsum("ns,nsf->nf", a.data, v.data) * proj))  # noqa: E731
    for t in (a, v):
        assert rel_error(t.grad, numeric_grad(f, t.data)) < 1e-5


# ---------------------------------------------------------------- dropout


def test_dropout_eval_and_p0_are_identity(rng):
    x = T(rng.normal(size=50))
    assert nd.dropout(x, 0.5, training=False, rng=None) is x
    assert nd.dropout(x, 0.0, training=True, rng=rng) is x


def test_dropout_keep_fraction_and_scale():
    x = T(np.ones(100_000))
    out = nd.dropout(x, 0.5, training=True, rng=np.random.default_rng(123)).data
    kept = np.count_nonzero(out) / out.size
    assert abs(kept - 0.5) <= 0.01
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_dropout_rejects_bad_p(rng):
    with pytest.raises(ValueError):
        nd.dropout(T([1.0]), 1.0, True, rng)


# ---------------------------------------------------------------- bce


def test_bce_closed_forms():
    assert nd.bce_with_logits(T(0.0), 1, 1.0).item() == pytest.approx(math.log(2), rel=1e-15)
    assert nd.bce_with_logits(T(0.0), 0, 7.0).item() == pytest.approx(math.log(2), rel=1e-15)
    sat = nd.bce_with_logits(T(50.0), 1, 1.0).item()
    assert 0 <= sat < 1e-20


def test_bce_matches_naive_formula(rng):
    z = rng.normal(scale=3, size=20)
    y = rng.integers(0, 2, size=20)
    w = 2.75
    sig = 1 / (1 + np.exp(-z))
    naive = -(w * y * np.log(sig) + (1 - y) * np.log(1 - sig))
    np.testing.assert_allclose(nd.bce_with_logits(T(z), y, w).data, naive, rtol=1e-12)


def test_bce_no_overflow_for_huge_logits():
    out = nd.bce_with_logits(T([1e4, -1e4, 1e4, -1e4]), np.array([1, 0, 0, 1]), 3.0).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0, 0, 1e4, 3e4])


@pytest.mark.parametrize("y,w", [(0, 1.0), (1, 1.0), (1, 6.0), (0, 2.75)])
def test_bce_gradient(y, w, rng):
    z = T(rng.normal(scale=2, size=6), True)
    nd.backward(nd.tsum(nd.bce_with_logits(z, y, w)))
    num = numeric_grad(lambda: float(np.sum(nd.bce_with_logits(T(z.data), y, w).data)), z.data)
    assert rel_error(z.grad, num) < 1e-5


# ---------------------------------------------------------------- backward / graph


def test_backward_sum_and_square():
    x = T([1.0, 2.0, 3.0], True)
    nd.backward(nd.tsum(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    y = T([1.0, 2.0], True)
    nd.backward(nd.tsum(nd.mul(y, y)))  # y feeds two consumer slots
    np.testing.assert_array_equal(y.grad, [2, 4])


def test_backward_accumulates_until_zeroed():
    x = T([1.0, 2.0], True)
    for _ in range(3):
        nd.backward(nd.tsum(nd.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [6, 12])
    x.zero_grad()
    nd.backward(nd.tsum(x))
    np.testing.assert_array_equal(x.grad, [1, 1])


def test_fan_out_accumulates_additively():
    x = T([0.5, -1.0], True)
    a = nd.relu(x)
    loss = nd.tsum(nd.add(nd.add(a, a), nd.mul(x, T([3.0, 3.0]))))
    nd.backward(loss)
    np.testing.assert_array_equal(x.grad, [5.0, 3.0])


def test_backward_requires_scalar():
    x = T([1.0, 2.0], True)
    with pytest.raises(ValueError, match="scalar"):
        nd.backward(nd.mul(x, x))


def test_no_grad_records_nothing():
    x = T([1.0], True)
    with nd.no_grad():
        y = nd.mul(x, x)
    assert not y.requires_grad and y._parents == ()


def test_deterministic_forward(rng):
    x, w, b = rng.normal(size=(4, 3, 20)), rng.normal(size=(5, 3, 7)), rng.normal(size=5)
    a = nd.conv1d(T(x), T(w), T(b), 3).data
    c = nd.conv1d(T(x), T(w), T(b), 3).data
    assert a.tobytes() == c.tobytes()
