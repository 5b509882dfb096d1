"""Update rules and weight initialization.

Optimizers keep their moment buffers keyed by parameter name so that state
survives model rebuilds (progressive growing) and checkpoint round-trips.
"""

import math
from dataclasses import dataclass

import numpy as np


class DivergenceError(FloatingPointError):
    """Raised when a gradient or update contains NaN/Inf; the step is not applied."""


def _check_finite(grads):
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}; step aborted")


class Optimizer:
    kind = None

    def __init__(self, lr):
        self.lr = lr
        self.t = 0
        self.buffers = {}

    def step(self, params):
        """Update every named parameter holding a gradient. ``params``: name -> Tensor."""
        live = {n: p for n, p in params.items() if p.trainable and p.grad is not None}
        _check_finite({n: p.grad for n, p in live.items()})
        self.t += 1
        for name, p in live.items():
            self._update(name, p.data, p.grad.astype(p.data.dtype, copy=False))

    def _update(self, name, theta, g):
        raise NotImplementedError

    def hyper(self):
        raise NotImplementedError

    def state_dict(self):
        out = {"t": np.array([self.t], dtype=np.float64)}
        for (name, slot), arr in self.buffers.items():
            out[f"{slot}.{name}"] = arr
        return out

    def load_state_dict(self, state):
        self.t = int(state["t"][0])
        self.buffers = {}
        for key, arr in state.items():
            if key == "t":
                continue
            slot, name = key.split(".", 1)
            self.buffers[(name, slot)] = np.array(arr, dtype=np.float32)

    def _buf(self, name, slot, like):
        key = (name, slot)
        if key not in self.buffers:
            self.buffers[key] = np.zeros_like(like)
        return self.buffers[key]


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8):
        super().__init__(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def _update(self, name, theta, g):
        m = self._buf(name, "m", theta)
        v = self._buf(name, "v", theta)
        b1, b2 = self.beta1, self.beta2
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / (1 - b1 ** self.t)
        vhat = v / (1 - b2 ** self.t)
        theta -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(theta.dtype)

    def hyper(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


class SGDNesterov(Optimizer):
    kind = "sgd_nesterov"

    def __init__(self, lr=1e-3, momentum=0.9):
        super().__init__(lr)
        self.momentum = momentum

    def _update(self, name, theta, g):
        v = self._buf(name, "v", theta)
        v *= self.momentum
        v += g
        theta -= (self.lr * (self.momentum * v + g)).astype(theta.dtype)

    def hyper(self):
        return {"lr": self.lr, "momentum": self.momentum}


def make_optimizer(kind, lr, beta1=0.5, beta2=0.999, eps=1e-8, momentum=0.9):
    if kind == "adam":
        return Adam(lr, beta1, beta2, eps)
    if kind in ("sgd_nesterov", "sgd++"):
        return SGDNesterov(lr, momentum)
    raise ValueError(f"unknown optimizer {kind!r}")


# -- initialization -----------------------------------------------------------

# this He-normal variant scales variance by image area times filter count
AREA_FAN = 256 * 256


@dataclass
class InitScheme:
    """kind: normal_002 | he_normal_paper | dynamic_scaled.

    ``fan_in`` swaps the 256*256*N_filters denominator for the
    usual kernel fan-in in the He-normal and dynamic variants.
    """

    kind: str = "normal_002"
    fan_in: bool = False

    def __post_init__(self):
        if self.kind not in ("normal_002", "he_normal_paper", "dynamic_scaled"):
            raise ValueError(f"unknown init scheme {self.kind!r}")

    def sigma(self, n_filters, fan_in=None):
        if self.kind == "normal_002":
            return 0.02
        if self.fan_in:
            if not fan_in:
                raise ValueError("fan-in variant needs the kernel fan-in")
            return math.sqrt(2.0 / fan_in)
        return math.sqrt(2.0 / (AREA_FAN * n_filters))


def init_weights(shape, scheme, rng, n_filters=None, fan_in=None):
    """Sample a weight array; returns (weights, forward_scale).

    For ``dynamic_scaled`` the stored weights are unit normal and the
    returned scale is applied at every forward pass; otherwise the scale is
    None and the weights already carry the scheme's variance.
    """
    if n_filters is None:
        n_filters = shape[0]
    sigma = scheme.sigma(n_filters, fan_in)
    if scheme.kind == "dynamic_scaled":
        return rng.standard_normal(shape).astype(np.float32), np.float32(sigma)
    return (rng.standard_normal(shape) * sigma).astype(np.float32), None
