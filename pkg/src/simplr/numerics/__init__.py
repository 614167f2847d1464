from . import ops
from .container import ContainerFormatError, read_container, write_container
from .gradcheck import CoordinateError, GradcheckError, finite_difference_check, gradient_errors, split_flat, split_kinks
from .ops import (
    ShapeError,
    bilinear_sample,
    conv2d_patchify,
    deconv2x,
    group_norm,
    layer_norm,
    linear,
    matmul,
    softmax,
)
from .rng import make_rng, split
from .optim import adamw_step, clip_grad_norm, lr_at
from .tensor import NonFiniteError, Parameter, Tensor, no_grad

__all__ = [
    "ContainerFormatError",
    "CoordinateError",
    "GradcheckError",
    "NonFiniteError",
    "Parameter",
    "ShapeError",
    "Tensor",
    "adamw_step",
    "bilinear_sample",
    "clip_grad_norm",
    "conv2d_patchify",
    "deconv2x",
    "finite_difference_check",
    "gradient_errors",
    "group_norm",
    "layer_norm",
    "linear",
    "lr_at",
    "make_rng",
    "split",
    "split_flat",
    "split_kinks",
    "matmul",
    "no_grad",
    "ops",
    "read_container",
    "softmax",
    "write_container",
]
