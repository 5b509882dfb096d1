import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mrgan import layers as L
from mrgan import tensor as T
from mrgan.tensor import Tensor, grad_check

finite = st.floats(-5, 5, allow_nan=False, width=32)
scales = st.floats(0.1, 4, allow_nan=False)


def t(x, dtype=np.float32):
    return Tensor(np.asarray(x), dtype=dtype)


def test_dense_examples():
    x = t([[1.0, 2.0]])
    assert np.array_equal(L.dense(x, t(np.eye(2)), t([0.0, 0.0])).data, x.data)
    y = L.dense(x, t([[1.0, 1.0], [0.0, 1.0]]), t([1.0, 0.0]))
    assert np.array_equal(y.data, [[4.0, 2.0]])
    with pytest.raises(L.ShapeError):
        L.dense(t(np.ones((1, 3))), t(np.eye(2)))


def test_conv_identity_and_overlap_counts():
    x = t(np.random.default_rng(0).standard_normal((2, 1, 5, 5)))
    assert np.array_equal(L.conv2d(x, t(np.ones((1, 1, 1, 1))), t([0.0])).data, x.data)
    y = L.conv2d(t(np.ones((1, 1, 3, 3))), t(np.ones((1, 1, 3, 3)))).data[0, 0]
    assert np.array_equal(y, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv_shapes():
    x = t(np.zeros((1, 1, 64, 64)))
    assert L.conv2d(x, t(np.zeros((2, 1, 5, 5))), stride=2).shape == (1, 2, 32, 32)
    assert L.conv2d(t(np.zeros((1, 1, 7, 7))), t(np.zeros((1, 1, 5, 5))), stride=2).shape[2:] == (4, 4)
    with pytest.raises(L.ShapeError):
        L.conv2d(t(np.zeros((1, 1, 2, 2))), t(np.zeros((1, 1, 5, 5))), padding="valid")


def test_conv_full_size_stride2_shape():
    x = t(np.zeros((1, 1, 256, 256)))
    assert L.conv2d(x, t(np.zeros((1, 1, 5, 5))), stride=2).shape == (1, 1, 128, 128)


def test_conv_transpose_examples():
    x = t(np.random.default_rng(1).standard_normal((1, 2, 4, 4)))
    w = np.zeros((2, 2, 1, 1))
    w[0, 0] = w[1, 1] = 1
    assert np.array_equal(L.conv_transpose2d(x, t(w), stride=1).data, x.data)
    assert L.conv_transpose2d(t(np.zeros((1, 3, 8, 8))), t(np.zeros((3, 3, 5, 5)))).shape == (1, 3, 16, 16)
    with pytest.raises(ValueError):
        L.conv_transpose2d(x, t(w), stride=3)


def test_conv_transpose_is_adjoint_of_conv():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 2, 6, 6))
    y = rng.standard_normal((1, 3, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    cx = L.conv2d(t(x, np.float64), t(w, np.float64)).data
    cty = L.conv_transpose2d(t(y, np.float64), t(w, np.float64), stride=1).data
    assert np.isclose((cx * y).sum(), (x * cty).sum(), rtol=1e-12)


def test_pool_examples():
    x = t([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert L.pool2d(x, "max").data.item() == 4.0
    assert L.pool2d(x, "avg").data.item() == 2.5
    assert L.pool2d(t(np.zeros((1, 32, 128, 128))), "max").shape == (1, 32, 64, 64)
    with pytest.raises(L.ShapeError):
        L.pool2d(t(np.zeros((1, 1, 3, 4))))


def test_upsample_examples():
    assert np.array_equal(L.upsample_nearest(t([[[[1.0]]]])).data, np.ones((1, 1, 2, 2)))
    assert L.upsample_nearest(t(np.zeros((1, 512, 4, 4)))).shape == (1, 512, 8, 8)


@given(arrays(np.float32, (2, 3, 4, 4), elements=finite))
def test_avgpool_inverts_upsample(x):
    assert np.array_equal(L.pool2d(L.upsample_nearest(t(x)), "avg").data, x)


def _bn_params(c):
    return t(np.ones(c)), t(np.zeros(c)), np.zeros(c, np.float32), np.ones(c, np.float32)


def test_batchnorm_examples():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((64, 2, 3, 3))
    x = (x - x.mean((0, 2, 3), keepdims=True)) / x.std((0, 2, 3), keepdims=True)
    y = L.batchnorm(t(x, np.float64), *_bn_params(2))
    assert np.allclose(y.data, x, atol=1e-4)
    g, b, mm, mv = _bn_params(2)
    b = t([0.5, -1.0])
    y = L.batchnorm(t(np.full((4, 2, 2, 2), 3.0)), g, b, mm, mv)
    assert np.allclose(y.data[:, 0], 0.5) and np.allclose(y.data[:, 1], -1.0)
    with pytest.raises(ValueError):
        L.batchnorm(t(np.zeros((1, 2, 2, 2))), *_bn_params(2))


def test_batchnorm_eval_uses_moving_stats():
    g, b, mm, mv = _bn_params(1)
    L.batchnorm(t(np.arange(8.0).reshape(8, 1)), g, b, mm, mv, momentum=0.0)
    assert np.isclose(mm[0], 3.5) and np.isclose(mv[0], 5.25)
    y = L.batchnorm(t([[3.5]]), g, b, mm, mv, train=False)
    assert abs(y.data.item()) < 1e-6


@given(arrays(np.float64, (6, 3, 2, 2), elements=st.floats(-5, 5, allow_nan=False)),
       st.floats(0.5, 3))
def test_batchnorm_train_output_is_standardized(x, spread):
    x = x + spread * np.arange(6).reshape(6, 1, 1, 1)
    y = L.batchnorm(t(x, np.float64), *_bn_params(3)).data
    var = x.var((0, 2, 3))
    assert np.all(np.abs(y.mean((0, 2, 3))) < 1e-5)
    # eps in the denominator shifts the variance by var / (var + eps)
    assert np.allclose(y.var((0, 2, 3)), var / (var + 1e-5), atol=1e-10)
    assert np.all(np.abs(y.var((0, 2, 3)) - 1) < 1e-4 + 1e-5 / var)


def test_pixelnorm_examples():
    y = L.pixelnorm(t(np.full((1, 4, 1, 1), 2.0)))
    assert np.all(np.abs(y.data - 1.0) < 1e-7)
    z = L.pixelnorm(t(np.zeros((1, 3, 2, 2))))
    assert np.array_equal(z.data, np.zeros((1, 3, 2, 2)))
    y = L.pixelnorm(t([[[[3.0]], [[4.0]]]], np.float64)).data.ravel()
    assert np.allclose(y, [0.848528, 1.131371], atol=1e-6)


@given(arrays(np.float64, (2, 5, 3, 3), elements=st.floats(-5, 5, allow_nan=False)))
def test_pixelnorm_rms_is_one(x):
    ms_in = (x ** 2).mean(1)
    y = L.pixelnorm(t(x, np.float64)).data
    rms = np.sqrt((y ** 2).mean(1))
    # eps under the root: rms_out = r / sqrt(r^2 + eps) exactly
    assert np.allclose(rms, np.sqrt(ms_in / (ms_in + 1e-8)), rtol=1e-12, atol=1e-12)
    # within 1e-5 of one once r^2 >= eps / 2e-5
    near = rms[ms_in >= 1e-8 / 2e-5]
    assert np.all(near <= 1 + 1e-12) and np.all(near >= 1 - 1e-5)


def test_pixelshuffle_examples():
    y = L.pixelshuffle(t(np.arange(1.0, 5.0).reshape(1, 4, 1, 1)))
    assert np.array_equal(y.data[0, 0], [[1, 2], [3, 4]])
    assert L.pixelshuffle(t(np.zeros((1, 256, 16, 16)))).shape == (1, 64, 32, 32)
    with pytest.raises(L.ShapeError):
        L.pixelshuffle(t(np.zeros((1, 6, 2, 2))))


@given(arrays(np.float32, (2, 8, 3, 3), elements=finite))
def test_space_to_depth_inverts_pixelshuffle(x):
    assert np.array_equal(L.space_to_depth(L.pixelshuffle(t(x))).data, x)


def test_minibatch_stddev_examples():
    x = np.random.default_rng(4).standard_normal((1, 3, 2, 2))
    assert np.all(L.minibatch_stddev(t(np.concatenate([x, x]))).data[:, 3] == 0)
    x = np.stack([np.zeros((2, 3, 3)), np.full((2, 3, 3), 2.0)])
    assert np.all(L.minibatch_stddev(t(x)).data[:, 2] == 1.0)
    assert L.minibatch_stddev(t(np.zeros((2, 512, 4, 4)))).shape == (2, 513, 4, 4)
    with pytest.raises(ValueError):
        L.minibatch_stddev(t(np.zeros((1, 2, 2, 2))))


@given(arrays(np.float32, (3, 2, 3, 3), elements=finite))
def test_minibatch_stddev_map_is_constant(x):
    extra = L.minibatch_stddev(t(x)).data[:, -1]
    assert np.all(extra == extra.flat[0])


def test_activation_examples():
    assert np.isclose(L.activation("lrelu", t([-1.0])).data[0], -0.2)
    assert L.activation("sigmoid", t([0.0])).data[0] == 0.5
    assert L.activation("tanh", t([0.0])).data[0] == 0.0
    assert L.activation("relu", t([-3.0])).data[0] == 0.0
    with pytest.raises(ValueError):
        L.activation("swish", t([0.0]))


def test_dropout_examples():
    x = t(np.random.default_rng(5).standard_normal((4, 4)))
    assert L.dropout(x, 0.0) is x
    assert L.dropout(x, 0.7, train=False) is x
    with pytest.raises(ValueError):
        L.dropout(x, 1.0)
    ones = t(np.ones(10 ** 5))
    y = L.dropout(ones, 0.5, rng=np.random.default_rng(6)).data
    assert abs(y.mean() - 1.0) < 0.05
    assert set(np.unique(y)) <= {0.0, 2.0}


@given(arrays(np.float64, (2, 3, 4, 4), elements=finite), scales)
def test_bias_free_layers_are_homogeneous(x, a):
    rng = np.random.default_rng(7)
    w = t(rng.standard_normal((2, 3, 3, 3)), np.float64)
    wt = t(rng.standard_normal((3, 2, 3, 3)), np.float64)
    wd = t(rng.standard_normal((5, 48)), np.float64)
    ops = [
        lambda v: L.conv2d(v, w),
        lambda v: L.conv_transpose2d(v, wt),
        lambda v: L.dense(T.reshape(v, (2, 48)), wd),
        lambda v: L.pool2d(v, "avg"),
        lambda v: L.upsample_nearest(v),
        lambda v: L.pixelshuffle(T.concat([v, v, v, v], 1)),
    ]
    for op in ops:
        lhs = op(t(a * x, np.float64)).data
        rhs = a * op(t(x, np.float64)).data
        assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-9)


def test_layer_gradients():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 2, 4, 4))
    w = t(rng.standard_normal((3, 2, 3, 3)), np.float64)
    wt = t(rng.standard_normal((2, 3, 5, 5)), np.float64)
    g, b, mm, mv = _bn_params(2)
    cases = [
        lambda v: L.conv2d(v, w, stride=2),
        lambda v: L.conv_transpose2d(v, wt),
        lambda v: L.batchnorm(v, g, b, mm.copy(), mv.copy()),
        lambda v: L.pixelnorm(v),
        lambda v: L.minibatch_stddev(v),
    ]
    for f in cases:
        r = t(rng.standard_normal(f(t(x, np.float64)).shape), np.float64)
        assert grad_check(lambda v: T.reduce_sum(f(v) * r), x, 1e-5) < 1e-4
