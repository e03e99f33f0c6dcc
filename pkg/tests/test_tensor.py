import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from mkisnet import backend
from mkisnet import tensor as T
from mkisnet.errors import (DegenerateBatchError, EmptyLossError, GeometryError, LabelError,
                            NonFiniteError, ParameterError, ShapeError)
from oracles import conv2d_loops, conv_transpose2d_loops, softmax_scalar, weighted_ce_scalar


def f64(a):
    return T.Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


# conv2d -------------------------------------------------------------------------

def test_conv2d_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 7))
    out = T.conv2d(f64(x), f64(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_all_ones_sums():
    out = T.conv2d(f64(np.ones((1, 1, 5, 5))), f64(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
    assert out[2, 2] == 9.0 and out[1, 3] == 9.0
    assert out[0, 0] == out[0, 4] == out[4, 0] == out[4, 4] == 4.0
    assert out[0, 2] == out[2, 0] == out[4, 2] == out[2, 4] == 6.0


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(1)
    x, w = rng.standard_normal((1, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3))
    np.testing.assert_array_equal(T.conv2d(f64(x), f64(w), stride=2, padding=1).data,
                                  conv2d_loops(x, w, 2, 1))


def test_conv2d_float32_close_to_oracle():
    rng = np.random.default_rng(2)
    x, w = rng.standard_normal((2, 3, 9, 9)), rng.standard_normal((4, 3, 5, 5))
    out = T.conv2d(T.Tensor(x, dtype=np.float32), T.Tensor(w, dtype=np.float32), padding=2).data
    ref = conv2d_loops(x, w, 1, 2)
    assert out.dtype == np.float32
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5 * np.abs(ref).max())


def test_conv2d_bias():
    x, w = f64(np.zeros((1, 1, 3, 3))), f64(np.ones((2, 1, 1, 1)))
    out = T.conv2d(x, w, bias=f64([1.5, -2.0])).data
    assert np.all(out[0, 0] == 1.5) and np.all(out[0, 1] == -2.0)


def test_conv2d_errors():
    with pytest.raises(ShapeError, match="axis 1"):
        T.conv2d(f64(np.ones((1, 2, 4, 4))), f64(np.ones((1, 3, 3, 3))))
    with pytest.raises(GeometryError):
        T.conv2d(f64(np.ones((1, 1, 2, 2))), f64(np.ones((1, 1, 5, 5))))
    with pytest.raises(ShapeError):
        T.conv2d(f64(np.ones((2, 2))), f64(np.ones((1, 1, 1, 1))))


# conv_transpose2d ----------------------------------------------------------------

def test_conv_transpose_single_tap():
    out = T.conv_transpose2d(f64(np.ones((1, 1, 1, 1))), f64(np.ones((1, 1, 2, 2))), stride=2, padding=0)
    np.testing.assert_array_equal(out.data, np.ones((1, 1, 2, 2)))


def test_conv_transpose_decoder_shape():
    x = T.Tensor(np.zeros((1, 24, 64, 64), dtype=np.float32))
    k = T.Tensor(np.zeros((24, 24, 4, 4), dtype=np.float32))
    assert T.conv_transpose2d(x, k, stride=2, padding=1).shape == (1, 24, 128, 128)


def test_conv_transpose_matches_direct_loops():
    rng = np.random.default_rng(3)
    x, w = rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((3, 2, 4, 4))
    np.testing.assert_array_equal(T.conv_transpose2d(f64(x), f64(w), stride=2, padding=1).data,
                                  conv_transpose2d_loops(x, w, 2, 1))


def test_adjoint_identity_through_backward():
    # <conv(x), y> == <x, conv_T(y)>, with conv_T obtained as the backward pass of conv
    rng = np.random.default_rng(4)
    x = T.Tensor(rng.standard_normal((2, 3, 9, 9)), requires_grad=True, dtype=np.float64)
    k = f64(rng.standard_normal((4, 3, 3, 3)))
    tape = T.Tape()
    with T.use_tape(tape):
        out = T.conv2d(x, k, stride=2, padding=1)
        y = rng.standard_normal(out.shape)
        out.backward(grad=y)
    lhs = float((out.data * y).sum())
    rhs = float((x.data * x.grad).sum())
    assert abs(lhs - rhs) <= 1e-6 * max(abs(lhs), abs(rhs))
    explicit = T.conv_transpose2d(f64(y), k, stride=2, padding=1).data
    np.testing.assert_allclose(explicit, x.grad, rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 3, 5]), st.integers(1, 3),
       st.integers(0, 2), st.integers(5, 9), st.integers(0, 2 ** 31))
def test_conv_transpose_is_adjoint(cin, cout, k, stride, pad, size, seed):
    pad = min(pad, k - 1)
    # without output padding the transpose only inverts geometries the stride tiles exactly
    assume((size + 2 * pad - k) % stride == 0)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, cin, size, size))
    w = rng.standard_normal((cout, cin, k, k))
    out = T.conv2d(f64(x), f64(w), stride=stride, padding=pad).data
    y = rng.standard_normal(out.shape)
    back = T.conv_transpose2d(f64(y), f64(w), stride=stride, padding=pad).data
    assert back.shape == x.shape
    lhs = (out * y).sum()
    rhs = (x * back).sum()
    assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs))


def test_backends_agree_bit_for_bit():
    if backend.compiled_kernels is None:
        pytest.skip("compiled kernels unavailable")
    rng = np.random.default_rng(5)
    x, w = rng.standard_normal((2, 3, 11, 10)), rng.standard_normal((4, 3, 5, 5))
    g = rng.standard_normal((2, 4, 6, 5))
    for kern in (backend.compiled_kernels, backend.python_kernels):
        assert kern.conv2d_forward(x, w, 2, 2, 1).shape == (2, 4, 6, 5)
    c, p = backend.compiled_kernels, backend.python_kernels
    np.testing.assert_array_equal(c.conv2d_forward(x, w, 2, 2, 1), p.conv2d_forward(x, w, 2, 2, 1))
    np.testing.assert_array_equal(c.conv2d_backward_input(g, w, 2, 2, 11, 10, 1),
                                  p.conv2d_backward_input(g, w, 2, 2, 11, 10, 1))
    np.testing.assert_allclose(c.conv2d_backward_weight(g, x, 2, 2, 5, 5, 1),
                               p.conv2d_backward_weight(g, x, 2, 2, 5, 5, 1), rtol=1e-12, atol=1e-12)


def test_thread_count_does_not_change_results():
    if backend.compiled_kernels is None:
        pytest.skip("compiled kernels unavailable")
    rng = np.random.default_rng(6)
    x, w = rng.standard_normal((2, 4, 12, 12)), rng.standard_normal((5, 4, 3, 3))
    c = backend.compiled_kernels
    np.testing.assert_array_equal(c.conv2d_forward(x, w, 1, 1, 1), c.conv2d_forward(x, w, 1, 1, 4))


# batch norm ----------------------------------------------------------------------

def test_batch_norm_constant_channel_gives_beta():
    x = np.ones((2, 2, 3, 3)) * np.array([3.0, -1.0])[None, :, None, None]
    out = T.batch_norm(f64(x), f64([2.0, 2.0]), f64([0.5, -0.25]), T.RunningStats.fresh(2, np.float64))
    assert np.all(out.data[:, 0] == 0.5) and np.all(out.data[:, 1] == -0.25)


def test_batch_norm_train_statistics():
    x = np.random.default_rng(7).standard_normal((2, 3, 4, 4)) * 3 + 1
    out = T.batch_norm(f64(x), f64(np.ones(3)), f64(np.zeros(3)), T.RunningStats.fresh(3, np.float64)).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)


def test_batch_norm_infer_scalar_oracle():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((1, 2, 2, 2))
    g, b = [1.5, 0.5], [0.1, -0.2]
    m, v = np.array([0.3, -0.7]), np.array([2.0, 0.5])
    out = T.batch_norm(f64(x), f64(g), f64(b), T.RunningStats(m, v), mode="infer", eps=1e-5).data
    for c in range(2):
        for i in range(2):
            for j in range(2):
                ref = g[c] * (x[0, c, i, j] - m[c]) / math.sqrt(v[c] + 1e-5) + b[c]
                assert out[0, c, i, j] == pytest.approx(ref, rel=1e-12)


def test_batch_norm_running_update():
    x = np.random.default_rng(9).standard_normal((2, 1, 3, 3))
    stats = T.RunningStats.fresh(1, np.float64)
    T.batch_norm(f64(x), f64([1.0]), f64([0.0]), stats, momentum=0.1)
    assert stats.mean[0] == pytest.approx(0.1 * x.mean())
    assert stats.var[0] == pytest.approx(0.9 + 0.1 * x.var())


def test_batch_norm_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        T.batch_norm(f64(np.ones((1, 2, 1, 1))), f64([1, 1]), f64([0, 0]), T.RunningStats.fresh(2))


# relu / dropout ----------------------------------------------------------------

def test_relu_values():
    np.testing.assert_array_equal(T.relu(f64([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_relu_all_negative_has_zero_gradient():
    x = T.Tensor(-np.ones(5), requires_grad=True, dtype=np.float64)
    with T.use_tape(T.Tape()):
        y = T.relu(x)
        T.tensor_sum(y).backward()
    assert np.all(y.data == 0) and np.all(x.grad == 0)


def test_dropout_identity_cases():
    x = f64(np.arange(6.0))
    assert T.dropout(x, 0.0, "train").data is x.data
    assert T.dropout(x, 0.4, "infer").data is x.data


def test_dropout_statistics():
    out = T.dropout(T.Tensor(np.ones(10 ** 6), dtype=np.float64), 0.4, "train", rng_seed=11).data
    assert 0.99 <= out.mean() <= 1.01
    assert 0.398 <= np.mean(out == 0) <= 0.402
    np.testing.assert_array_equal(out, T.dropout(f64(np.ones(10 ** 6)), 0.4, "train", rng_seed=11).data)


def test_dropout_rejects_bad_probability():
    with pytest.raises(ParameterError):
        T.dropout(f64(np.ones(3)), 1.0)


# softmax / add ----------------------------------------------------------------

def test_softmax_uniform_and_forced():
    assert np.all(T.softmax_channels(f64(np.zeros((1, 2, 3, 3)))).data == 0.5)
    x = np.zeros((1, 2, 1, 1))
    x[0, 1] = math.log(3)
    assert T.softmax_channels(f64(x)).data[0, 1, 0, 0] == pytest.approx(0.75, abs=1e-15)


def test_softmax_scalar_oracle():
    x = np.random.default_rng(12).standard_normal((2, 3, 4, 4)) * 5
    p = T.softmax_channels(f64(x)).data
    for b in range(2):
        for i in range(4):
            for j in range(4):
                np.testing.assert_allclose(p[b, :, i, j], softmax_scalar(list(x[b, :, i, j])), atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 4), st.floats(0.1, 60), st.integers(0, 2 ** 31))
def test_softmax_is_a_distribution(c, scale, seed):
    x = np.random.default_rng(seed).standard_normal((1, c, 3, 3)) * scale
    p = T.softmax_channels(f64(x)).data
    assert p.min() >= 0 and p.max() <= 1
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)


def test_elementwise_add():
    a = f64(np.random.default_rng(13).standard_normal((1, 2, 3, 3)))
    np.testing.assert_array_equal(T.elementwise_add(a, f64(np.zeros(a.shape))).data, a.data)
    assert np.all(T.elementwise_add(a, f64(-a.data)).data == 0)
    with pytest.raises(ShapeError):
        T.elementwise_add(a, f64(np.zeros((1, 2, 3, 4))))


# losses -----------------------------------------------------------------------

def test_wce_near_zero_for_perfect_prediction():
    y = np.random.default_rng(14).integers(0, 2, (1, 4, 4))
    p = np.where(np.stack([y == 0, y == 1], axis=1), 1 - 1e-12, 1e-12)
    assert float(T.weighted_cross_entropy(f64(p), y).data) <= 1e-11


def test_wce_uniform_is_ln2():
    y = np.random.default_rng(15).integers(0, 2, (2, 3, 3))
    loss = float(T.weighted_cross_entropy(f64(np.full((2, 2, 3, 3), 0.5)), y).data)
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_wce_hand_case():
    p1 = np.array([[0.9, 0.2], [0.6, 0.05]])
    probs = np.stack([1 - p1, p1])[None]
    y = np.array([[[1, 0], [1, 0]]])
    w = (0.5556, 5.0)
    hand = -(5.0 * math.log(0.9) + 0.5556 * math.log(0.8) + 5.0 * math.log(0.6) + 0.5556 * math.log(0.95)) / 4
    loss = float(T.weighted_cross_entropy(f64(probs), y, w).data)
    assert loss == pytest.approx(hand, rel=1e-12)
    assert loss == pytest.approx(weighted_ce_scalar(probs, y, w), rel=1e-12)


def test_fused_loss_matches_softmax_then_wce():
    rng = np.random.default_rng(16)
    z = rng.standard_normal((2, 2, 5, 5))
    y = rng.integers(0, 2, (2, 5, 5))
    m = rng.random((2, 5, 5)) > 0.3
    fused = float(T.softmax_cross_entropy(f64(z), y, (0.5556, 5.0), m).data)
    ref = weighted_ce_scalar(T.softmax_channels(f64(z)).data, y, (0.5556, 5.0), m)
    assert fused == pytest.approx(ref, rel=1e-12)


def test_loss_errors():
    p = f64(np.full((1, 2, 2, 2), 0.5))
    with pytest.raises(EmptyLossError):
        T.weighted_cross_entropy(p, np.zeros((1, 2, 2), int), mask=np.zeros((1, 2, 2), bool))
    with pytest.raises(LabelError):
        T.weighted_cross_entropy(p, np.full((1, 2, 2), 2))


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        T.conv2d(f64(np.full((1, 1, 2, 2), np.inf)), f64(np.ones((1, 1, 1, 1))))


# tape -------------------------------------------------------------------------

def test_gradients_accumulate_across_uses():
    x = T.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True, dtype=np.float64)
    with T.use_tape(T.Tape()):
        T.tensor_sum(T.add(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [2, 2, 2])


def test_no_grad_records_nothing():
    tape = T.Tape()
    x = T.Tensor(np.ones(3), requires_grad=True, dtype=np.float64)
    with T.use_tape(tape), T.no_grad():
        T.relu(x)
    assert not tape.nodes


def test_madd_counter_counts_conv():
    with T.madd_counter() as counter:
        T.conv2d(T.Tensor(np.ones((1, 1, 10, 10))), T.Tensor(np.ones((1, 1, 1, 1))))
    assert counter.total == 100


# gradient checks --------------------------------------------------------------

def test_grad_check_linear_sum_is_exact():
    x = f64(np.random.default_rng(17).standard_normal((3, 4)))
    assert T.grad_check(lambda: T.tensor_sum(x), [x]) <= 1e-10


def test_grad_check_composite():
    rng = np.random.default_rng(18)
    x, k = f64(rng.standard_normal((1, 3, 8, 8))), f64(rng.standard_normal((2, 3, 3, 3)))
    y = rng.integers(0, 2, (1, 8, 8))
    fn = lambda: T.weighted_cross_entropy(T.softmax_channels(T.conv2d(x, k, padding=1)), y, (0.5556, 5.0))
    assert T.grad_check(fn, [x, k], epsilon=1e-5) < 1e-4


def test_grad_check_batch_norm_train():
    rng = np.random.default_rng(19)
    x, g, b = f64(rng.standard_normal((2, 2, 3, 3))), f64(rng.standard_normal(2)), f64(rng.standard_normal(2))
    probe = rng.standard_normal((2, 2, 3, 3))
    stats = T.RunningStats.fresh(2, np.float64)
    assert T.grad_check(lambda: T.dot(T.batch_norm(x, g, b, stats), probe), [x, g, b]) < 1e-4


def test_grad_check_requires_float64():
    x = T.Tensor(np.ones(3, dtype=np.float32))
    with pytest.raises(ParameterError):
        T.grad_check(lambda: T.tensor_sum(x), [x])


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 3]),
       st.integers(1, 2), st.integers(4, 7), st.integers(0, 2 ** 31))
def test_conv_gradients_on_random_shapes(b, cin, cout, k, stride, size, seed):
    rng = np.random.default_rng(seed)
    x, w = f64(rng.standard_normal((b, cin, size, size))), f64(rng.standard_normal((cout, cin, k, k)))
    out_shape = T.conv2d(x, w, stride=stride, padding=k // 2).shape
    probe = rng.standard_normal(out_shape)
    assert T.grad_check(lambda: T.dot(T.conv2d(x, w, stride=stride, padding=k // 2), probe), [x, w]) < 1e-4


def test_forward_is_deterministic():
    rng = np.random.default_rng(20)
    x, w = f64(rng.standard_normal((2, 3, 8, 8))), f64(rng.standard_normal((4, 3, 3, 3)))
    np.testing.assert_array_equal(T.conv2d(x, w, padding=1).data, T.conv2d(x, w, padding=1).data)
