"""Numpy toolkit for U-net segmentation and GAN image synthesis with PCA-based evaluation."""

from .losses import LossSpec
from .models import (Model, ProGANStage, build_dcgan, build_progan, build_srresgan, build_unet, count_params,
                     forward_shapes, transfer_params)
from .optim import Adam, InitScheme, SGDNesterov
from .tensor import Tensor, backward, grad, grad_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "Adam", "InitScheme", "LossSpec", "Model", "ProGANStage", "SGDNesterov", "Tensor", "backward",
    "build_dcgan", "build_progan", "build_srresgan", "build_unet", "count_params", "forward_shapes",
    "grad", "grad_check", "no_grad", "transfer_params",
]
