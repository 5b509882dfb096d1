import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mrgan import _kernels as K


@st.composite
def geometry(draw):
    k = draw(st.sampled_from([1, 2, 3, 5]))
    s = draw(st.integers(1, 2))
    h = draw(st.integers(k, k + 6))
    w = draw(st.integers(k, k + 6))
    return draw(st.integers(1, 2)), draw(st.integers(1, 3)), h, w, k, s


@settings(max_examples=40)
@given(geometry(), st.sampled_from([np.float32, np.float64]))
def test_backends_bitwise_equal(geo, dtype):
    b, c, h, w, k, s = geo
    x = np.random.default_rng(h * w).standard_normal((b, c, h, w)).astype(dtype)
    cols = K.im2col_numpy(x, k, s)
    assert K.im2col_numba(x, k, s).tobytes() == cols.tobytes()
    y = np.random.default_rng(k).standard_normal(cols.shape).astype(dtype)
    assert K.col2im_numba(y, x.shape, k, s).tobytes() == K.col2im_numpy(y, x.shape, k, s).tobytes()


@settings(max_examples=40)
@given(geometry())
def test_col2im_is_adjoint(geo):
    b, c, h, w, k, s = geo
    rng = np.random.default_rng(b + c)
    x = rng.standard_normal((b, c, h, w))
    cols = K.im2col(x, k, s)
    y = rng.standard_normal(cols.shape)
    assert np.isclose((cols * y).sum(), (x * K.col2im(y, x.shape, k, s)).sum(), rtol=1e-12)


def test_backend_switch():
    prev = K.set_backend("numpy")
    try:
        assert K.backend() == "numpy"
        with pytest.raises(ValueError):
            K.set_backend("cuda")
    finally:
        K.set_backend(prev)


def test_out_size():
    assert K.out_size(256, 5, 2) == 126 and K.out_size(7, 3, 1) == 5
