"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive records its parents and a backward rule. Backward rules
are themselves written with differentiable primitives, so gradients can be
taken of gradients (``grad(..., create_graph=True)``), which the gradient
penalties rely on.

Storage is float32 by default. Reductions accumulate in float64. Passing
``dtype=np.float64`` to a leaf makes everything downstream float64 through
numpy's type promotion; the finite-difference checker uses that.
"""

import contextlib
import math

import numpy as np

from . import _kernels

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def _grad_mode(enabled):
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, enabled
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "trainable",
                 "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None, name=None, trainable=True):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.trainable = trainable
        self._parents = ()
        self._backward = None
        self._op = None

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.name = None
        t.trainable = True
        t._parents = ()
        t._backward = None
        t._op = None
        return t

    # -- introspection ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # -- operators ----------------------------------------------------------

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(_lift(o, self), self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(_lift(o, self), self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(_lift(o, self), self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(_lift(o, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def square(self):
        return mul(self, self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def backward(self, retain_graph=False):
        backward(self, retain_graph=retain_graph)


def tensor(data, requires_grad=False, dtype=None, name=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=like.dtype))


def _const(arr, like):
    return Tensor._wrap(np.asarray(arr, dtype=like.dtype))


def _make(data, parents, backward, op):
    out = Tensor._wrap(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


# -- tape -------------------------------------------------------------------

class Tape:
    """Recorded operations reachable from ``root``, inputs before outputs."""

    def __init__(self, root):
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self):
        return len(self.nodes)

    def release(self):
        for node in self.nodes:
            if node._parents:
                node._parents = ()
                node._backward = None
                node.requires_grad = False


def _accumulate(grads, key, g):
    cur = grads.get(key)
    grads[key] = g if cur is None else add(cur, g)


def _propagate(root, seed, create_graph):
    tape = Tape(root)
    grads = {id(root): seed}
    with _grad_mode(create_graph):
        for node in reversed(tape.nodes):
            if not node._parents:
                continue
            g = grads.get(id(node))
            if g is None:
                continue
            parent_grads = node._backward(g, node)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if not np.all(np.isfinite(pg.data)):
                    raise FloatingPointError(
                        f"non-finite gradient produced by backward of '{node._op}' "
                        f"(output shape {node.shape})")
                _accumulate(grads, id(p), pg)
    return tape, grads


def backward(loss, retain_graph=False):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not on the tape (no input requires grad)")
    seed = Tensor._wrap(np.ones_like(loss.data))
    tape, grads = _propagate(loss, seed, create_graph=False)
    for node in tape.nodes:
        if node._parents:
            continue
        g = grads.get(id(node))
        if g is None:
            continue
        node.grad = np.array(g.data) if node.grad is None else node.grad + g.data
    if not retain_graph:
        tape.release()


def grad(output, inputs, grad_output=None, create_graph=False):
    """Return d(output)/d(input) for each input, without touching ``.grad``.

    With ``create_graph`` the returned gradients are themselves on the tape.
    """
    single = isinstance(inputs, Tensor)
    if single:
        inputs = [inputs]
    if grad_output is None:
        if output.size != 1:
            raise ValueError("grad_output required for non-scalar output")
        grad_output = Tensor._wrap(np.ones_like(output.data))
    _, grads = _propagate(output, grad_output, create_graph)
    out = []
    for x in inputs:
        g = grads.get(id(x))
        if g is None:
            g = Tensor._wrap(np.zeros_like(x.data))
        out.append(g)
    return out[0] if single else out


def zero_grads(params):
    for p in params:
        p.grad = None


# -- broadcasting helpers -----------------------------------------------------

def _sum_to(g, shape):
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and g.shape[lead + i] != 1)
    return reshape(reduce_sum(g, axes), shape)


def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _kept_shape(shape, axes):
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


# -- elementwise --------------------------------------------------------------

def add(a, b):
    b = _lift(b, a)
    return _make(a.data + b.data, (a, b),
                 lambda g, out: (_sum_to(g, a.shape), _sum_to(g, b.shape)), "add")


def sub(a, b):
    b = _lift(b, a)
    return _make(a.data - b.data, (a, b),
                 lambda g, out: (_sum_to(g, a.shape), _sum_to(neg(g), b.shape)), "sub")


def mul(a, b):
    b = _lift(b, a)
    return _make(a.data * b.data, (a, b),
                 lambda g, out: (_sum_to(mul(g, b), a.shape), _sum_to(mul(g, a), b.shape)), "mul")


def div(a, b):
    b = _lift(b, a)

    def bw(g, out):
        ga = _sum_to(div(g, b), a.shape)
        gb = _sum_to(neg(div(mul(g, out), b)), b.shape)
        return ga, gb

    return _make(a.data / b.data, (a, b), bw, "div")


def neg(a):
    return _make(-a.data, (a,), lambda g, out: (neg(g),), "neg")


def square(a):
    return mul(a, a)


def exp(a):
    return _make(np.exp(a.data), (a,), lambda g, out: (mul(g, out),), "exp")


def log(a):
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive element")
    return _make(np.log(a.data), (a,), lambda g, out: (div(g, a),), "log")


def sqrt(a):
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative element")

    def bw(g, out):
        # d sqrt(x) at x = 0 is taken as 0 rather than inf
        pos = out.data > 0
        safe = add(out, _const(~pos, out))
        return (mul(div(mul(g, _const(pos, out)), safe), 0.5),)

    return _make(np.sqrt(a.data), (a,), bw, "sqrt")


def tanh(a):
    return _make(np.tanh(a.data), (a,),
                 lambda g, out: (mul(g, sub(_const(1.0, out), mul(out, out))),), "tanh")


def sigmoid(a):
    data = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(data.astype(a.dtype, copy=False), (a,),
                 lambda g, out: (mul(g, mul(out, sub(_const(1.0, out), out))),), "sigmoid")


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g, out: (mul(g, _const(mask, a)),), "relu")


def leaky_relu(a, slope=0.2):
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _make(a.data * scale, (a,), lambda g, out: (mul(g, _const(scale, a)),), "leaky_relu")


def clip(a, lo=None, hi=None):
    """Clamp into [lo, hi]; gradient passes only where the input was inside."""
    data = np.clip(a.data, lo, hi)
    mask = np.ones(a.shape, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi
    return _make(data, (a,), lambda g, out: (mul(g, _const(mask, a)),), "clip")


def clampmin(a, lo):
    return clip(a, lo, None)


# -- shape ------------------------------------------------------------------

def reshape(a, shape):
    shape = tuple(shape)
    return _make(a.data.reshape(shape), (a,), lambda g, out: (reshape(g, a.shape),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g, out: (transpose(g, inv),), "transpose")


def swap_last(a):
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def broadcast_to(a, shape):
    shape = tuple(shape)
    return _make(np.broadcast_to(a.data, shape), (a,),
                 lambda g, out: (_sum_to(g, a.shape),), "broadcast_to")


def _check_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    for it in items:
        if not (isinstance(it, (slice, int, np.integer)) or it is Ellipsis or it is None):
            raise TypeError("only basic (slice/int) indexing is differentiable")


def getitem(a, idx):
    _check_basic_index(idx)
    return _make(a.data[idx], (a,), lambda g, out: (scatter(g, idx, a.shape),), "getitem")


def scatter(a, idx, shape):
    """Place ``a`` at ``idx`` inside a zero tensor of ``shape`` (adjoint of getitem)."""
    data = np.zeros(shape, dtype=a.dtype)
    data[idx] = a.data
    return _make(data, (a,), lambda g, out: (getitem(g, idx),), "scatter")


def pad(a, widths):
    """Zero-pad; ``widths`` is one (lo, hi) pair per axis."""
    shape = tuple(n + lo + hi for n, (lo, hi) in zip(a.shape, widths))
    idx = tuple(slice(lo, lo + n) for n, (lo, _) in zip(a.shape, widths))
    return scatter(a, idx, shape)


def concat(tensors, axis=0):
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g, out):
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = (slice(None),) * axis + (slice(int(lo), int(hi)),)
            grads.append(getitem(g, idx))
        return tuple(grads)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


# -- reductions ---------------------------------------------------------------

def reduce_sum(a, axis=None, keepdims=False):
    axes = _axes(axis, a.ndim)
    data = np.sum(a.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    kept = _kept_shape(a.shape, axes)

    def bw(g, out):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _make(np.asarray(data), (a,), bw, "sum")


def reduce_mean(a, axis=None, keepdims=False):
    axes = _axes(axis, a.ndim)
    count = math.prod(a.shape[i] for i in axes)
    if count == 0:
        raise ValueError("mean over an empty axis set")
    return div(reduce_sum(a, axes, keepdims), float(count))


def _first_argmax_mask(x, axes):
    rest = [i for i in range(x.ndim) if i not in axes]
    perm = rest + list(axes)
    moved = x.transpose(perm)
    flat = moved.reshape(moved.shape[:len(rest)] + (-1,))
    hit = flat.argmax(axis=-1)
    mask = np.zeros(flat.shape, dtype=bool)
    np.put_along_axis(mask, hit[..., None], True, axis=-1)
    return mask.reshape(moved.shape).transpose(np.argsort(perm))


def reduce_max(a, axis=None, keepdims=False):
    """Max reduction; the gradient goes to the first maximal element."""
    if a.size == 0:
        raise ValueError("max of an empty tensor")
    axes = _axes(axis, a.ndim)
    data = np.max(a.data, axis=axes, keepdims=keepdims)
    mask = _first_argmax_mask(a.data, axes)
    kept = _kept_shape(a.shape, axes)

    def bw(g, out):
        return (mul(broadcast_to(reshape(g, kept), a.shape), _const(mask, a)),)

    return _make(np.asarray(data), (a,), bw, "max")


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def bw(g, out):
        return (_sum_to(matmul(g, swap_last(b)), a.shape),
                _sum_to(matmul(swap_last(a), g), b.shape))

    return _make(np.matmul(a.data, b.data), (a, b), bw, "matmul")


def im2col(x, k, s):
    return _make(_kernels.im2col(x.data, k, s), (x,),
                 lambda g, out: (col2im(g, x.shape, k, s),), "im2col")


def col2im(c, shape, k, s):
    shape = tuple(shape)
    return _make(_kernels.col2im(c.data, shape, k, s), (c,),
                 lambda g, out: (im2col(g, k, s),), "col2im")


# -- gradient checking --------------------------------------------------------

def grad_check(f, x, step=1e-3):
    """Max relative error between autodiff and central differences of ``f`` at ``x``.

    ``f`` maps a tensor to a scalar tensor. Both gradients are computed in
    float64. Error per element is |a - n| / max(|a|, |n|, 1e-8).
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True, dtype=np.float64)
    y = f(xt)
    if y.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    analytic = grad(y, xt).data.astype(np.float64).ravel()

    # grad mode stays on: f may differentiate internally (gradient penalties)
    flat = x0.ravel()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = float(f(Tensor(x0, dtype=np.float64)).data.sum(dtype=np.float64))
        flat[i] = keep - step
        lo = float(f(Tensor(x0, dtype=np.float64)).data.sum(dtype=np.float64))
        flat[i] = keep
        numeric[i] = (hi - lo) / (2.0 * step)

    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise FloatingPointError("NaN or Inf in gradient during grad_check")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
