"""Layers used by the four architectures.

The functional forms (``conv2d``, ``batchnorm``, ...) are pure functions of
their tensor arguments. The classes wrap them with parameter declarations
and a symbolic ``output_shape`` so a model can be shape-walked and counted
without allocating weights.
"""

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ShapeError(ValueError):
    pass


# -- functional -----------------------------------------------------------------

def dense(x, w, b=None, wscale=None):
    """x (B, I) times w (O, I) transposed, plus b (O,)."""
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense: input {x.shape} does not match weight {w.shape}")
    if wscale is not None:
        w = w * wscale
    y = T.matmul(x, T.transpose(w, (1, 0)))
    return y + b if b is not None else y


def same_padding(n, k, s):
    """(lo, hi) zero padding giving ceil(n / s) outputs."""
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return total // 2, total - total // 2


def _resolve_padding(padding, H, W, k, s):
    if padding == "same":
        return same_padding(H, k, s) + same_padding(W, k, s)
    if padding == "valid":
        return (0, 0, 0, 0)
    if isinstance(padding, int):
        return (padding,) * 4
    return tuple(padding)


def conv2d(x, w, b=None, stride=1, padding="same", wscale=None):
    """Cross-correlation of x (B, C, H, W) with w (O, C, k, k)."""
    B, C, H, W = x.shape
    O, Cw, k, k2 = w.shape
    if C != Cw or k != k2:
        raise ShapeError(f"conv2d: input channels {C} vs weight {w.shape}")
    ph0, ph1, pw0, pw1 = _resolve_padding(padding, H, W, k, stride)
    if k > H + ph0 + ph1 or k > W + pw0 + pw1:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {(H, W)}")
    if any((ph0, ph1, pw0, pw1)):
        x = T.pad(x, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))
    Ho = (H + ph0 + ph1 - k) // stride + 1
    Wo = (W + pw0 + pw1 - k) // stride + 1
    if wscale is not None:
        w = w * wscale
    cols = T.im2col(x, k, stride)
    y = T.matmul(T.reshape(w, (O, C * k * k)), cols)
    y = T.reshape(y, (B, O, Ho, Wo))
    if b is not None:
        y = y + T.reshape(b, (1, O, 1, 1))
    return y


def conv_transpose2d(x, w, b=None, stride=2, padding="same", wscale=None):
    """Adjoint of conv2d with w (Cin, Cout, k, k).

    With ``padding="same"`` the output is exactly ``stride`` times the input
    extent; ``"valid"`` gives (n - 1) * stride + k.
    """
    if stride not in (1, 2):
        raise ValueError(f"conv_transpose2d: unsupported stride {stride}")
    B, C, H, W = x.shape
    Cw, O, k, _ = w.shape
    if C != Cw:
        raise ShapeError(f"conv_transpose2d: input channels {C} vs weight {w.shape}")
    if wscale is not None:
        w = w * wscale
    Hf, Wf = (H - 1) * stride + k, (W - 1) * stride + k
    cols = T.matmul(T.transpose(T.reshape(w, (C, O * k * k)), (1, 0)), T.reshape(x, (B, C, H * W)))
    y = T.col2im(cols, (B, O, Hf, Wf), k, stride)
    if padding == "same":
        Ho, Wo = H * stride, W * stride
        th, tw = Hf - Ho, Wf - Wo
        if th < 0 or tw < 0:
            raise ShapeError(f"conv_transpose2d: kernel {k} too small for stride {stride}")
        y = y[:, :, th // 2:th // 2 + Ho, tw // 2:tw // 2 + Wo]
    if b is not None:
        y = y + T.reshape(b, (1, O, 1, 1))
    return y


def pool2d(x, op="max", window=2):
    B, C, H, W = x.shape
    if H % window or W % window:
        raise ShapeError(f"pool2d: spatial extent {(H, W)} not divisible by {window}")
    blocks = T.reshape(x, (B, C, H // window, window, W // window, window))
    if op == "max":
        return T.reduce_max(blocks, (3, 5))
    if op == "avg":
        return T.reduce_mean(blocks, (3, 5))
    raise ValueError(f"unknown pooling {op!r}")


def upsample_nearest(x, factor=2):
    B, C, H, W = x.shape
    y = T.broadcast_to(T.reshape(x, (B, C, H, 1, W, 1)), (B, C, H, factor, W, factor))
    return T.reshape(y, (B, C, H * factor, W * factor))


def _bn_axes(x):
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bn_view(p, x):
    return T.reshape(p, (1, -1) if x.ndim == 2 else (1, -1, 1, 1))


def batchnorm(x, gamma, beta, moving_mean, moving_var, train=True, momentum=0.9, eps=1e-5):
    """Per-channel batch normalization.

    In train mode the batch statistics normalize ``x`` and the moving
    averages (plain arrays) are updated in place.
    """
    axes = _bn_axes(x)
    if train:
        if x.shape[0] < 2:
            raise ValueError("batchnorm in train mode needs a batch of at least 2")
        mean = T.reduce_mean(x, axes, keepdims=True)
        centered = x - mean
        var = T.reduce_mean(centered * centered, axes, keepdims=True)
        moving_mean *= momentum
        moving_mean += (1 - momentum) * mean.data.reshape(-1)
        moving_var *= momentum
        moving_var += (1 - momentum) * var.data.reshape(-1)
        xhat = centered / T.sqrt(var + eps)
    else:
        shape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
        mean = np.asarray(moving_mean, dtype=x.dtype).reshape(shape)
        inv = (1.0 / np.sqrt(np.asarray(moving_var, dtype=np.float64) + eps)).astype(x.dtype).reshape(shape)
        xhat = (x - mean) * inv
    return xhat * _bn_view(gamma, x) + _bn_view(beta, x)


def pixelnorm(x, eps=1e-8):
    """Divide each pixel's channel vector by its RMS (plus eps under the root)."""
    ms = T.reduce_mean(x * x, 1, keepdims=True)
    return x / T.sqrt(ms + eps)


def pixelshuffle(x, r=2):
    B, C, H, W = x.shape
    if C % (r * r):
        raise ShapeError(f"pixelshuffle: {C} channels not divisible by {r * r}")
    c = C // (r * r)
    y = T.reshape(x, (B, c, r, r, H, W))
    y = T.transpose(y, (0, 1, 4, 2, 5, 3))
    return T.reshape(y, (B, c, H * r, W * r))


def space_to_depth(x, r=2):
    """Inverse permutation of :func:`pixelshuffle`."""
    B, C, H, W = x.shape
    if H % r or W % r:
        raise ShapeError(f"space_to_depth: {(H, W)} not divisible by {r}")
    y = T.reshape(x, (B, C, H // r, r, W // r, r))
    y = T.transpose(y, (0, 1, 3, 5, 2, 4))
    return T.reshape(y, (B, C * r * r, H // r, W // r))


def minibatch_stddev(x):
    """Append one map holding the mean (over C, H, W) of the batch std."""
    B, C, H, W = x.shape
    if B < 2:
        raise ValueError("minibatch_stddev needs a batch of at least 2")
    centered = x - T.reduce_mean(x, 0, keepdims=True)
    std = T.sqrt(T.reduce_mean(centered * centered, 0))
    stat = T.reshape(T.reduce_mean(std), (1, 1, 1, 1))
    return T.concat([x, T.broadcast_to(stat, (B, 1, H, W))], axis=1)


ACTIVATIONS = {
    "relu": T.relu,
    "lrelu": lambda x: T.leaky_relu(x, 0.2),
    "sigmoid": T.sigmoid,
    "tanh": T.tanh,
    "linear": lambda x: x,
}


def activation(kind, x):
    try:
        return ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def dropout(x, rate, train=True, rng=None):
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return x * Tensor._wrap(keep)


# -- parameterized layers ---------------------------------------------------------

class ParamSpec:
    __slots__ = ("name", "shape", "trainable", "init", "fan_out")

    def __init__(self, name, shape, trainable=True, init="weight", fan_out=None):
        self.name = name
        self.shape = tuple(shape)
        self.trainable = trainable
        self.init = init
        self.fan_out = fan_out

    @property
    def size(self):
        return math.prod(self.shape)


class Layer:
    """Base class: declared parameters, symbolic shape, numeric forward."""

    label = "?"
    n_inputs = 1

    def __init__(self):
        self.params = {}
        self.wscale = None

    def param_specs(self):
        return []

    def output_shape(self, *in_shapes):
        return in_shapes[0]

    def forward(self, *xs, train=True, rng=None):
        raise NotImplementedError

    def _p(self, name):
        return self.params.get(name)

    def _check(self, got, want, what):
        if tuple(got) != tuple(want):
            raise ShapeError(f"{self.label}: expected {what} {tuple(want)}, got {tuple(got)}")


class Input(Layer):
    n_inputs = 0

    def __init__(self, shape, label="Input image"):
        super().__init__()
        self.shape = tuple(shape)
        self.label = label

    def output_shape(self):
        return self.shape

    def forward(self, x, train=True, rng=None):
        if x.shape[1:] != self.shape:
            if math.prod(x.shape[1:]) != math.prod(self.shape):
                raise ShapeError(f"input of shape {x.shape[1:]} does not fit {self.shape}")
            x = T.reshape(x, (x.shape[0],) + self.shape)
        return x


class Dense(Layer):
    label = "Dense"

    def __init__(self, in_features, out_features, reshape_to=None, bias=True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.reshape_to = tuple(reshape_to) if reshape_to else None
        self.bias = bias

    def param_specs(self):
        specs = [ParamSpec("w", (self.out_features, self.in_features), fan_out=self.out_features)]
        if self.bias:
            specs.append(ParamSpec("b", (self.out_features,), init="zeros"))
        return specs

    def output_shape(self, s):
        if math.prod(s) != self.in_features:
            raise ShapeError(f"Dense: input {tuple(s)} has {math.prod(s)} features, expected {self.in_features}")
        return self.reshape_to or (self.out_features, 1, 1)

    def forward(self, x, train=True, rng=None):
        y = dense(T.reshape(x, (x.shape[0], -1)), self.params["w"], self._p("b"), self.wscale)
        if self.reshape_to:
            return T.reshape(y, (x.shape[0],) + self.reshape_to)
        return T.reshape(y, (x.shape[0], self.out_features, 1, 1))


class Conv2d(Layer):
    def __init__(self, cin, cout, k, stride=1, padding="same", bias=True):
        super().__init__()
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.padding, self.bias = stride, padding, bias
        self.label = f"Conv {k}x{k}"

    def param_specs(self):
        specs = [ParamSpec("w", (self.cout, self.cin, self.k, self.k), fan_out=self.cout)]
        if self.bias:
            specs.append(ParamSpec("b", (self.cout,), init="zeros"))
        return specs

    def output_shape(self, s):
        C, H, W = s
        if C != self.cin:
            raise ShapeError(f"{self.label}: expected {self.cin} input channels, got {C}")
        ph0, ph1, pw0, pw1 = _resolve_padding(self.padding, H, W, self.k, self.stride)
        if self.k > H + ph0 + ph1 or self.k > W + pw0 + pw1:
            raise ShapeError(f"{self.label}: kernel larger than padded input {(H, W)}")
        return (self.cout, (H + ph0 + ph1 - self.k) // self.stride + 1,
                (W + pw0 + pw1 - self.k) // self.stride + 1)

    def forward(self, x, train=True, rng=None):
        return conv2d(x, self.params["w"], self._p("b"), self.stride, self.padding, self.wscale)


class ConvTranspose2d(Layer):
    def __init__(self, cin, cout, k, stride=2, padding="same", bias=True):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError(f"unsupported transpose-conv stride {stride}")
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.padding, self.bias = stride, padding, bias
        self.label = f"Conv Trans {k}x{k}"

    def param_specs(self):
        specs = [ParamSpec("w", (self.cin, self.cout, self.k, self.k), fan_out=self.cout)]
        if self.bias:
            specs.append(ParamSpec("b", (self.cout,), init="zeros"))
        return specs

    def output_shape(self, s):
        C, H, W = s
        if C != self.cin:
            raise ShapeError(f"{self.label}: expected {self.cin} input channels, got {C}")
        if self.padding == "same":
            return (self.cout, H * self.stride, W * self.stride)
        return (self.cout, (H - 1) * self.stride + self.k, (W - 1) * self.stride + self.k)

    def forward(self, x, train=True, rng=None):
        return conv_transpose2d(x, self.params["w"], self._p("b"), self.stride, self.padding, self.wscale)


class Pool(Layer):
    label = "Downsample"

    def __init__(self, op="max"):
        super().__init__()
        self.op = op

    def output_shape(self, s):
        C, H, W = s
        if H % 2 or W % 2:
            raise ShapeError(f"Downsample: odd spatial extent {(H, W)}")
        return (C, H // 2, W // 2)

    def forward(self, x, train=True, rng=None):
        return pool2d(x, self.op)


class Upsample(Layer):
    label = "Upsample"

    def output_shape(self, s):
        C, H, W = s
        return (C, 2 * H, 2 * W)

    def forward(self, x, train=True, rng=None):
        return upsample_nearest(x, 2)


class PixelShuffle(Layer):
    label = "PixelShuffle"

    def __init__(self, r=2):
        super().__init__()
        self.r = r

    def output_shape(self, s):
        C, H, W = s
        if C % (self.r ** 2):
            raise ShapeError(f"PixelShuffle: {C} channels not divisible by {self.r ** 2}")
        return (C // self.r ** 2, H * self.r, W * self.r)

    def forward(self, x, train=True, rng=None):
        return pixelshuffle(x, self.r)


class MinibatchStd(Layer):
    label = "Minibatch std"

    def output_shape(self, s):
        C, H, W = s
        return (C + 1, H, W)

    def forward(self, x, train=True, rng=None):
        return minibatch_stddev(x)


class Identity(Layer):
    label = "-"

    def forward(self, x, train=True, rng=None):
        return x


class Add(Layer):
    label = "Add"
    n_inputs = 2

    def output_shape(self, a, b):
        self._check(b, a, "matching operand shape")
        return a

    def forward(self, a, b, train=True, rng=None):
        return a + b


class Concat(Layer):
    n_inputs = 2

    def __init__(self, label="Concatenate"):
        super().__init__()
        self.label = label

    def output_shape(self, a, b):
        self._check(b[1:], a[1:], "matching spatial extent")
        return (a[0] + b[0],) + tuple(a[1:])

    def forward(self, a, b, train=True, rng=None):
        return T.concat([a, b], axis=1)


class Blend(Layer):
    """alpha * new + (1 - alpha) * old; the progressive fade-in."""

    label = "Blend"
    n_inputs = 2

    def __init__(self, alpha=1.0):
        super().__init__()
        self.alpha = alpha

    def output_shape(self, new, old):
        self._check(old, new, "matching operand shape")
        return new

    def forward(self, new, old, train=True, rng=None):
        if self.alpha == 1.0:
            return new
        return new * self.alpha + old * (1.0 - self.alpha)


class BatchNorm(Layer):
    label = "BN"

    def __init__(self, channels, momentum=0.9, eps=1e-5):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps

    def param_specs(self):
        c = (self.channels,)
        return [ParamSpec("gamma", c, init="ones"), ParamSpec("beta", c, init="zeros"),
                ParamSpec("moving_mean", c, trainable=False, init="zeros"),
                ParamSpec("moving_var", c, trainable=False, init="ones")]

    def forward(self, x, train=True, rng=None):
        p = self.params
        return batchnorm(x, p["gamma"], p["beta"], p["moving_mean"].data, p["moving_var"].data,
                         train, self.momentum, self.eps)


class PixelNorm(Layer):
    label = "PN"

    def forward(self, x, train=True, rng=None):
        return pixelnorm(x)
