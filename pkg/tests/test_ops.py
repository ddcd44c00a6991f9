import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from st3d import ops
from st3d.errors import ConfigError, DegenerateBatchError, ShapeError
from st3d.tensor import Tensor, backward

from helpers import check_op_gradients


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float32), requires_grad=grad)


def conv_params(cin, cout, k, stride=1, pad=0, groups=1, rng=None):
    rng = rng or np.random.default_rng(0)
    kt = ops.triple(k)
    w = T(rng.standard_normal((cout, cin // groups) + kt), grad=True)
    return ops.ConvParams(cin, cout, kt, stride, pad, groups, weight=w)


# ------------------------------------------------------------------ conv3d

def test_conv_single_multiply():
    p = ops.ConvParams(1, 1, 1, 1, 0, 1, weight=T(np.full((1, 1, 1, 1, 1), 2.0)))
    assert ops.conv3d(T(np.full((1, 1, 1, 1, 1), 5.0)), p).data.item() == 10.0


def test_conv1_stem_shape():
    p = ops.ConvParams(3, 64, 7, (1, 2, 2), 3, weight=Tensor.placeholder((64, 3, 7, 7, 7)))
    assert p.output_shape((1, 3, 16, 112, 112)) == (1, 64, 16, 56, 56)


def test_grouped_strided_conv_matches_reference():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 4, 5, 6, 6)).astype(np.float32)
    p = conv_params(4, 6, 3, 2, 1, 2, rng)
    got = ops.conv3d(T(x), p).data
    want = ops.conv3d_reference(x, p.weight.data, 2, 1, 2)
    assert np.max(np.abs(got - want)) <= 1e-5


def test_conv_channel_mismatch_names_axis():
    p = conv_params(4, 2, 3, 1, 1)
    with pytest.raises(ShapeError) as e:
        ops.conv3d(T(np.zeros((1, 3, 4, 4, 4))), p)
    assert e.value.axis == "c"


def test_conv_too_small_input_names_axis():
    p = conv_params(1, 1, 3)
    with pytest.raises(ShapeError) as e:
        ops.conv3d(T(np.zeros((1, 1, 1, 5, 5))), p)
    assert e.value.axis == "t"


def test_groups_must_divide_channels():
    with pytest.raises(ConfigError):
        ops.ConvParams(6, 4, 3, 1, 1, groups=4, weight=Tensor.placeholder((4, 1, 3, 3, 3)))


def test_zero_weights_give_exact_zero():
    p = ops.ConvParams(3, 5, 3, 1, 1, weight=T(np.zeros((5, 3, 3, 3, 3))))
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 5, 5))
    assert not np.any(ops.conv3d(T(x), p).data)


def test_conv_is_deterministic():
    rng = np.random.default_rng(2)
    x = T(rng.standard_normal((3, 4, 6, 9, 9)))
    p = conv_params(4, 8, 3, 1, 1, rng=rng)
    assert np.array_equal(ops.conv3d(x, p).data, ops.conv3d(x, p).data)


@pytest.mark.parametrize("k,stride,pad,groups", [(3, 1, 1, 1), (3, 2, 1, 2), (1, 2, 0, 1), ((1, 3, 3), (1, 2, 2), (0, 1, 1), 3)])
def test_conv_gradients(k, stride, pad, groups):
    rng = np.random.default_rng(3)
    x = T(rng.standard_normal((2, 6, 4, 5, 5)), grad=True)
    p = conv_params(6, 6, k, stride, pad, groups, rng)
    assert check_op_gradients(lambda a, w: ops.conv3d(a, p), [x, p.weight]) == []


# -------------------------------------------------------------- batch norm

def test_batch_norm_unit_example():
    p = ops.BatchNormParams(1, eps=0.0)
    out = ops.batch_norm(T(np.array([-1.0, 1.0]).reshape(2, 1, 1, 1, 1)), p)
    assert out.data.reshape(-1).tolist() == [-1.0, 1.0]


def test_batch_norm_zero_gamma():
    p = ops.BatchNormParams(3, gamma=T(np.zeros(3)), beta=T(np.full(3, 7.0)))
    x = np.random.default_rng(0).standard_normal((2, 3, 2, 2, 2))
    assert np.all(ops.batch_norm(T(x), p).data == 7.0)


def test_batch_norm_training_statistics():
    x = np.random.default_rng(4).standard_normal((2, 3, 4, 4, 4)) * 5 + 3
    out = ops.batch_norm(T(x), ops.BatchNormParams(3)).data.astype(np.float64)
    mean = out.mean(axis=(0, 2, 3, 4))
    var = out.var(axis=(0, 2, 3, 4))
    assert np.all(np.abs(mean) < 1e-5)
    assert np.all(np.abs(var - 1) < 1e-4)


def test_batch_norm_running_stats_update():
    x = np.random.default_rng(5).standard_normal((2, 2, 3, 3, 3)).astype(np.float32)
    p = ops.BatchNormParams(2, momentum=0.1)
    ops.batch_norm(T(x), p)
    flat = x.transpose(1, 0, 2, 3, 4).reshape(2, -1).astype(np.float64)
    np.testing.assert_allclose(p.running_mean, 0.1 * flat.mean(1), rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(p.running_var, 0.9 + 0.1 * flat.var(1, ddof=1), rtol=1e-5)


def test_batch_norm_inference_is_affine_and_repeatable():
    p = ops.BatchNormParams(2, training=False, running_mean=np.array([1.0, -2.0], np.float32),
                            running_var=np.array([4.0, 0.25], np.float32))
    x = T(np.random.default_rng(6).standard_normal((1, 2, 2, 2, 2)))
    a, b = ops.batch_norm(x, p).data, ops.batch_norm(x, p).data
    assert np.array_equal(a, b)
    want = (x.data - p.running_mean[None, :, None, None, None]) / np.sqrt(
        p.running_var[None, :, None, None, None] + p.eps)
    np.testing.assert_allclose(a, want, rtol=1e-6, atol=1e-6)


def test_batch_norm_empty_channel():
    with pytest.raises(DegenerateBatchError):
        ops.batch_norm(T(np.zeros((0, 2, 1, 1, 1))), ops.BatchNormParams(2))


def test_batch_norm_gradients():
    rng = np.random.default_rng(7)
    p = ops.BatchNormParams(3, gamma=T(rng.uniform(0.5, 1.5, 3), grad=True),
                            beta=T(rng.standard_normal(3), grad=True))
    x = T(rng.standard_normal((2, 3, 2, 3, 3)), grad=True)
    assert check_op_gradients(lambda a, g, b: ops.batch_norm(a, p), [x, p.gamma, p.beta]) == []


# ---------------------------------------------------------------- pointwise

def test_relu_values_and_mask():
    x = T([-2.0, 0.0, 3.0], grad=True)
    y = ops.relu(x)
    assert y.data.tolist() == [0.0, 0.0, 3.0]
    neg = T(-np.ones(4), grad=True)
    out = ops.relu(neg)
    assert not out.data.any()
    backward(out.sum())
    assert not neg.grad.any()


def test_relu_gradient():
    # keep inputs further than the difference step from the kink at 0
    rng = np.random.default_rng(8)
    x = T(rng.choice([-1.0, 1.0], (3, 4)) * rng.uniform(0.1, 2.0, (3, 4)), grad=True)
    assert check_op_gradients(ops.relu, [x]) == []


def test_add_mul_broadcast_gradients():
    rng = np.random.default_rng(9)
    a = T(rng.standard_normal((2, 3, 1, 2, 2)), grad=True)
    b = T(rng.standard_normal((1, 3, 1, 1, 1)), grad=True)
    assert check_op_gradients(ops.add, [a, b]) == []
    assert check_op_gradients(ops.mul, [a, b]) == []


def test_reshape_and_sum_gradients():
    x = T(np.random.default_rng(10).standard_normal((2, 3, 4)), grad=True)
    assert check_op_gradients(lambda a: ops.reshape(a, (6, 4)), [x]) == []
    assert check_op_gradients(lambda a: ops.sum_all(a), [x]) == []


# ------------------------------------------------------------------ pooling

def window_2x2():
    return T(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 1, 2, 2))


def test_max_pool_window():
    assert ops.pool3d(window_2x2(), "max", (1, 2, 2), (1, 2, 2)).data.item() == 4.0


def test_avg_pool_window():
    assert ops.pool3d(window_2x2(), "avg", (1, 2, 2), (1, 2, 2)).data.item() == 2.5


def test_stem_pool_shape():
    x = Tensor.placeholder((1, 64, 16, 56, 56))
    assert ops.pool3d(x, "max", 3, 2, 1).shape == (1, 64, 8, 28, 28)


def test_max_pool_ignores_padding():
    x = T(-np.ones((1, 1, 1, 2, 2)) * 5)
    out = ops.pool3d(x, "max", (1, 3, 3), 1, (0, 1, 1))
    assert np.all(out.data == -5.0)


def test_avg_pool_excludes_padding_from_count():
    x = T(np.full((1, 1, 1, 2, 2), 6.0))
    out = ops.pool3d(x, "avg", (1, 3, 3), 1, (0, 1, 1))
    assert np.all(out.data == 6.0)


def test_pool_rejects_empty_window():
    with pytest.raises(ConfigError):
        ops.pool3d(window_2x2(), "max", 1, 1, 1)


@pytest.mark.parametrize("mode", ["max", "avg"])
def test_pool_gradients(mode):
    x = T(np.random.default_rng(11).permutation(2 * 2 * 4 * 5 * 5).reshape(2, 2, 4, 5, 5) * 0.1, grad=True)
    assert check_op_gradients(lambda a: ops.pool3d(a, mode, 3, 2, 1), [x]) == []


def test_global_avg_pool():
    x = T(np.full((2, 3, 2, 2, 2), 3.0))
    assert np.all(ops.global_avg_pool(x).data == 3.0)
    assert ops.global_avg_pool(Tensor.placeholder((1, 512, 1, 4, 4))).shape == (1, 512, 1, 1, 1)
    r = np.random.default_rng(12).standard_normal((2, 3, 2, 3, 4)).astype(np.float32)
    got = ops.global_avg_pool(T(r)).data.reshape(2, 3)
    for n in range(2):
        for c in range(3):
            total, count = 0.0, 0
            for v in r[n, c].reshape(-1):
                total += float(v)
                count += 1
            assert abs(got[n, c] - total / count) <= 1e-6


def test_global_avg_pool_gradient():
    x = T(np.random.default_rng(13).standard_normal((2, 3, 2, 2, 3)), grad=True)
    assert check_op_gradients(ops.global_avg_pool, [x]) == []


# ------------------------------------------------------------------- linear

def test_linear_identity():
    x = T(np.random.default_rng(14).standard_normal((3, 4)))
    out = ops.linear(x, T(np.eye(4)), T(np.zeros(4)))
    assert np.array_equal(out.data, x.data)


def test_linear_hand_example():
    out = ops.linear(T([[1.0, 2.0]]), T([[3.0, 4.0], [0.0, 1.0]]), T([1.0, 0.0]))
    assert out.data.tolist() == [[12.0, 2.0]]


def test_linear_dimension_mismatch():
    with pytest.raises(ShapeError):
        ops.linear(T(np.zeros((2, 3))), T(np.zeros((4, 5))), T(np.zeros(4)))


def test_linear_gradients():
    rng = np.random.default_rng(15)
    x, w, b = (T(rng.standard_normal(s), grad=True) for s in [(3, 5), (4, 5), (4,)])
    assert check_op_gradients(ops.linear, [x, w, b]) == []


# --------------------------------------------------------------- channels

def test_concat_shapes_and_inverse():
    a = T(np.arange(2.0).reshape(1, 2, 1, 1, 1))
    b = T(np.arange(3.0).reshape(1, 3, 1, 1, 1) + 10)
    c = ops.concat_channels(a, b)
    assert c.shape == (1, 5, 1, 1, 1)
    assert np.array_equal(ops.slice_channels(c, 0, 2).data, a.data)
    assert np.array_equal(ops.slice_channels(c, 2, 5).data, b.data)


def test_concat_gradient_of_sum_is_ones():
    a = T(np.ones((1, 2, 2, 2, 2)), grad=True)
    b = T(np.ones((1, 3, 2, 2, 2)), grad=True)
    backward(ops.concat_channels(a, b).sum())
    assert np.all(a.grad == 1) and np.all(b.grad == 1)


def test_concat_mismatch():
    with pytest.raises(ShapeError) as e:
        ops.concat_channels(T(np.zeros((1, 2, 2, 2, 2))), T(np.zeros((1, 2, 2, 3, 2))))
    assert e.value.axis == "h"


def test_channel_ops_gradients():
    rng = np.random.default_rng(16)
    a = T(rng.standard_normal((2, 2, 3, 3, 3)), grad=True)
    b = T(rng.standard_normal((2, 3, 3, 3, 3)), grad=True)
    assert check_op_gradients(ops.concat_channels, [a, b]) == []
    assert check_op_gradients(lambda x: ops.slice_channels(x, 1, 3), [b]) == []
    assert check_op_gradients(lambda x: ops.pad_channels(x, 5), [a]) == []
    assert check_op_gradients(lambda x: ops.subsample(x, (2, 2, 2)), [a]) == []


# ------------------------------------------------------ softmax cross-entropy

def test_uniform_scores_give_log_c():
    loss = ops.softmax_cross_entropy(T(np.zeros((3, 7))), [0, 3, 6])
    assert abs(loss.item() - math.log(7)) < 1e-6


def test_saturated_margin():
    scores = np.zeros((2, 4))
    scores[0, 1] = scores[1, 2] = 50.0
    assert ops.softmax_cross_entropy(T(scores), [1, 2]).item() < 1e-8


def test_label_out_of_range():
    with pytest.raises(ValueError):
        ops.softmax_cross_entropy(T(np.zeros((1, 3))), [3])


def test_softmax_rows_and_gradient_rows():
    s = T(np.random.default_rng(17).standard_normal((4, 10)) * 3, grad=True)
    assert np.all(np.abs(ops.softmax(s.data).sum(axis=1) - 1) < 1e-5)
    backward(ops.softmax_cross_entropy(s, [0, 1, 2, 9]))
    assert np.all(np.abs(s.grad.sum(axis=1)) < 1e-5)


def test_cross_entropy_gradient():
    s = T(np.random.default_rng(18).standard_normal((4, 10)), grad=True)
    assert check_op_gradients(lambda a: ops.softmax_cross_entropy(a, [1, 5, 9, 0]), [s]) == []


# ---------------------------------------------------------- shape formula

@settings(max_examples=200, deadline=None)
@given(size=st.integers(1, 40), k=st.integers(1, 7), s=st.integers(1, 3), p=st.integers(0, 3))
def test_output_size_formula(size, k, s, p):
    expected = (size + 2 * p - k) // s + 1
    if expected < 1:
        with pytest.raises(ShapeError):
            ops.out_dims((size, 1, 1), (k, 1, 1), (s, 1, 1), (p, 0, 0))
        return
    assert ops.out_dim(size, k, s, p) == expected
    x = Tensor.placeholder((1, 1, size, 1, 1))
    conv = ops.ConvParams(1, 1, (k, 1, 1), (s, 1, 1), (p, 0, 0), weight=Tensor.placeholder((1, 1, k, 1, 1)))
    assert conv.output_shape(x.shape)[2] == expected
    if p < k:
        assert ops.pool3d(x, "max", (k, 1, 1), (s, 1, 1), (p, 0, 0)).shape[2] == expected
