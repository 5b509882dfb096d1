"""Patch extraction kernels behind convolution.

``im2col`` unfolds k x k windows of a padded NCHW batch into columns and
``col2im`` is its exact adjoint (scatter-add back onto the image grid).
Both exist as numba ``@njit`` loops and as pure numpy. The numba col2im is
used when numba imports cleanly, unless ``MRGAN_NUMBA=0`` is set in the
environment; im2col always takes the numpy path, which is faster. Both
paths accumulate in the same order, so their outputs are bitwise equal.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_FALSEY = {"0", "false", "no", "off"}

_backend = "numba" if os.environ.get("MRGAN_NUMBA", "1").lower() not in _FALSEY else "numpy"
_nb = None


def backend():
    return _backend


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    prev, _backend = _backend, name
    return prev


def out_size(n, k, s):
    return (n - k) // s + 1


# -- numpy ------------------------------------------------------------------

def im2col_numpy(x, k, s):
    B, C, H, W = x.shape
    Ho, Wo = out_size(H, k, s), out_size(W, k, s)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    # (B, C, Ho, Wo, k, k) -> (B, C, k, k, Ho, Wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * k * k, Ho * Wo)


def col2im_numpy(cols, shape, k, s):
    B, C, H, W = shape
    Ho, Wo = out_size(H, k, s), out_size(W, k, s)
    cols = cols.reshape(B, C, k, k, Ho, Wo)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += cols[:, :, i, j]
    return out


# -- numba ------------------------------------------------------------------

def _compile():
    from numba import njit

    @njit(cache=True, nogil=True)
    def im2col_nb(x, k, s, out):
        B, C, H, W = x.shape
        Ho = (H - k) // s + 1
        Wo = (W - k) // s + 1
        for b in range(B):
            for c in range(C):
                for i in range(k):
                    for j in range(k):
                        row = (c * k + i) * k + j
                        for y in range(Ho):
                            base = y * Wo
                            for xx in range(Wo):
                                out[b, row, base + xx] = x[b, c, y * s + i, xx * s + j]

    @njit(cache=True, nogil=True)
    def col2im_nb(cols, k, s, out):
        B, C, H, W = out.shape
        Ho = (H - k) // s + 1
        Wo = (W - k) // s + 1
        for b in range(B):
            for c in range(C):
                for i in range(k):
                    for j in range(k):
                        row = (c * k + i) * k + j
                        for y in range(Ho):
                            base = y * Wo
                            for xx in range(Wo):
                                out[b, c, y * s + i, xx * s + j] += cols[b, row, base + xx]

    return im2col_nb, col2im_nb


def _numba_kernels():
    global _nb, _backend
    if _nb is None:
        try:
            _nb = _compile()
        except ImportError:
            _backend = "numpy"
            return None
    return _nb


def im2col_numba(x, k, s):
    im2col_nb, _ = _numba_kernels()
    B, C, H, W = x.shape
    out = np.empty((B, C * k * k, out_size(H, k, s) * out_size(W, k, s)), dtype=x.dtype)
    im2col_nb(np.ascontiguousarray(x), k, s, out)
    return out


def col2im_numba(cols, shape, k, s):
    _, col2im_nb = _numba_kernels()
    out = np.zeros(shape, dtype=cols.dtype)
    col2im_nb(np.ascontiguousarray(cols), k, s, out)
    return out


# -- dispatch ---------------------------------------------------------------

def _use_numba():
    return _backend == "numba" and _numba_kernels() is not None


def im2col(x, k, s):
    """(B, C, H, W) -> (B, C*k*k, Ho*Wo); rows ordered (c, i, j)."""
    if k > x.shape[2] or k > x.shape[3]:
        raise ValueError(f"kernel {k} larger than padded input {x.shape[2:]}")
    # the strided numpy view beats the numba loop here (see benchmarks/), results are identical
    return im2col_numpy(x, k, s)


def col2im(cols, shape, k, s):
    """Adjoint of :func:`im2col` for an image of ``shape``."""
    if _use_numba():
        return col2im_numba(cols, shape, k, s)
    return col2im_numpy(cols, shape, k, s)
