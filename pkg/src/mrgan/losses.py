"""Segmentation and adversarial losses, gradient penalties and weight clipping."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import Tensor, clip, grad, log, reduce_mean, reduce_sum, sqrt

PROB_EPS = 1e-7
GAN_KINDS = ("gan_original", "lsgan", "wgan", "wgan_gp", "dragan")
WASSERSTEIN = ("wgan", "wgan_gp")
# DRAGAN regularizes the original loss
BCE_BASED = ("gan_original", "dragan")


@dataclass
class LossSpec:
    kind: str = "gan_original"
    lambda_adv: float = 1.0
    lambda_gp: float = 0.0
    one_sided_smoothing: bool = False
    clip_threshold: Optional[float] = None
    eps_drift: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("bce", "dice") + GAN_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.lambda_adv <= 0:
            raise ValueError("lambda_adv must be > 0")
        if self.lambda_gp < 0:
            raise ValueError("lambda_gp must be >= 0")
        if self.kind == "wgan" and self.clip_threshold is None:
            self.clip_threshold = 0.01
        if self.kind != "wgan" and self.clip_threshold is not None:
            raise ValueError("clip_threshold applies to the wgan loss only")
        if self.clip_threshold is not None and self.clip_threshold <= 0:
            raise ValueError("clip_threshold must be > 0")

    @property
    def real_target(self):
        return 0.9 if self.one_sided_smoothing else 1.0

    @property
    def has_penalty(self):
        return self.kind in ("wgan_gp", "dragan")


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype if like is not None else None)


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def bce(pred, target):
    """Mean binary cross entropy; predictions clamped to [1e-7, 1 - 1e-7]."""
    pred = _as_tensor(pred)
    target = _as_tensor(target, pred)
    _check_same_shape(pred, target)
    p = clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    return -reduce_mean(target * log(p) + (1.0 - target) * log(1.0 - p))


def _bce_const(pred, t):
    """BCE against a constant target ``t``."""
    p = clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    if t == 1.0:
        return -reduce_mean(log(p))
    if t == 0.0:
        return -reduce_mean(log(1.0 - p))
    return -reduce_mean(log(p) * t + log(1.0 - p) * (1.0 - t))


def dice_coefficient(x, y, smooth=0.0):
    """2|X n Y| / (|X| + |Y|) for binary masks."""
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if not (np.isin(x, (0, 1)).all() and np.isin(y, (0, 1)).all()):
        raise ValueError("dice_coefficient expects binary masks")
    xb, yb = x.astype(bool), y.astype(bool)
    tp = int(np.count_nonzero(xb & yb))
    denom = int(np.count_nonzero(xb)) + int(np.count_nonzero(yb))
    if denom == 0 and smooth == 0:
        raise ZeroDivisionError("both masks empty: Dice is 0/0")
    return (2.0 * tp + smooth) / (denom + smooth)


def dice_loss(pred, target, smooth=1.0):
    """1 - soft Dice, differentiable in ``pred``."""
    pred = _as_tensor(pred)
    target = _as_tensor(target, pred)
    _check_same_shape(pred, target)
    inter = reduce_sum(pred * target)
    total = reduce_sum(pred) + reduce_sum(target)
    return 1.0 - (inter * 2.0 + smooth) / (total + smooth)


def _check_finite(*ts):
    for t in ts:
        if not np.all(np.isfinite(t.data)):
            raise FloatingPointError("NaN or Inf in discriminator output")


def gan_loss(kind, d_real, d_fake, spec=None):
    """(L_G, L_D) for discriminator outputs on a real and a fake batch.

    With one-sided smoothing the real term of L_D targets 0.9. When
    ``eps_drift`` is set L_D includes eps_drift * mean(d_real^2).
    """
    spec = spec or LossSpec(kind if kind in GAN_KINDS else "gan_original")
    d_real, d_fake = _as_tensor(d_real), _as_tensor(d_fake)
    _check_finite(d_real, d_fake)
    t = spec.real_target
    l_g = generator_loss(kind, d_fake)
    if kind in BCE_BASED:
        l_d = _bce_const(d_real, t) + _bce_const(d_fake, 0.0)
    elif kind == "lsgan":
        l_d = reduce_mean((d_real - t).square()) + reduce_mean(d_fake.square())
    else:
        l_d = reduce_mean(d_fake) - reduce_mean(d_real)
    if spec.eps_drift:
        l_d = l_d + reduce_mean(d_real.square()) * spec.eps_drift
    return l_g, l_d


def generator_loss(kind, d_fake):
    """L_G alone: -E log D(G(z)) (original, DRAGAN), E (D(G(z)) - 1)^2 or -E D(G(z))."""
    d_fake = _as_tensor(d_fake)
    _check_finite(d_fake)
    if kind in BCE_BASED:
        return _bce_const(d_fake, 1.0)
    if kind == "lsgan":
        return reduce_mean((d_fake - 1.0).square())
    if kind in WASSERSTEIN:
        return -reduce_mean(d_fake)
    raise ValueError(f"{kind!r} is not an adversarial loss")


def _input_gradient_penalty(d, x_m):
    x_m = Tensor(x_m, requires_grad=True)
    out = d(x_m)
    g = grad(reduce_sum(out), x_m, create_graph=True)
    axes = tuple(range(1, g.ndim))
    norms = sqrt(reduce_sum(g.square(), axis=axes))
    return reduce_mean((norms - 1.0).square())


def _per_sample_alpha(rng, n, ndim):
    return rng.uniform(0.0, 1.0, size=(n,) + (1,) * (ndim - 1))


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)


def gradient_penalty_wgan_gp(d, x_real, x_fake, rng):
    """E[(||grad D(x_m)|| - 1)^2] with x_m = a*x_real + (1-a)*x_fake, one a per sample."""
    xr, xf = _data(x_real), _data(x_fake)
    if xr.shape != xf.shape:
        raise ValueError(f"shape mismatch: {xr.shape} vs {xf.shape}")
    a = _per_sample_alpha(rng, xr.shape[0], xr.ndim)
    x_m = (a * xr + (1.0 - a) * xf).astype(xr.dtype)
    return _input_gradient_penalty(d, x_m)


def gradient_penalty_dragan(d, x_real, rng):
    """Penalty at a*x_real + (1-a)*x_p with x_p ~ U(0, std(x_real)/2) elementwise."""
    xr = _data(x_real)
    if xr.shape[0] < 2:
        raise ValueError("DRAGAN penalty needs a batch of at least 2")
    a = _per_sample_alpha(rng, xr.shape[0], xr.ndim)
    sigma_x = float(np.std(xr, dtype=np.float64))
    x_p = rng.uniform(0.0, 0.5 * sigma_x, size=xr.shape)
    x_m = (a * xr + (1.0 - a) * x_p).astype(xr.dtype)
    return _input_gradient_penalty(d, x_m)


def gradient_penalty(spec, d, x_real, x_fake, rng):
    if spec.kind == "wgan_gp":
        return gradient_penalty_wgan_gp(d, x_real, x_fake, rng)
    if spec.kind == "dragan":
        return gradient_penalty_dragan(d, x_real, rng)
    raise ValueError(f"{spec.kind!r} has no gradient penalty")


def discriminator_total(l_d, penalty, spec):
    """lambda_adv * L_D + lambda_gp * penalty (drift is already inside L_D)."""
    total = l_d * spec.lambda_adv
    if penalty is not None:
        total = total + penalty * spec.lambda_gp
    return total


def generator_total(l_g, spec):
    return l_g * spec.lambda_adv


def weight_clip(params, threshold):
    """Clamp every trainable parameter elementwise to [-threshold, threshold] in place."""
    if threshold <= 0:
        raise ValueError("clip threshold must be > 0")
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        if p.trainable:
            np.clip(p.data, -threshold, threshold, out=p.data)


def max_abs_weight(params):
    values = params.values() if isinstance(params, dict) else params
    return max((float(np.max(np.abs(p.data))) for p in values if p.trainable and p.size), default=0.0)
