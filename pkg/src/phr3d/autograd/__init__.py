from .tensor import Tensor, Parameter, no_grad, is_grad_enabled, check_finite
from .functional import (
    conv2d,
    conv_transpose2d,
    maxpool2d,
    avgpool_global,
    relu,
    sigmoid,
    batchnorm2d,
    linear,
    add,
    scale,
    concat_channels,
    upsample_nearest,
    sigmoid_cross_entropy_pixelwise,
    l2_pixelwise,
    l2_z,
)
from .init import Gaussian, Zeros, Constant, BilinearUpsample, Identity, bilinear_filter, bilinear_deconv_weight, materialize
from .optim import SGD, LrSchedule, freeze, unfreeze
from .serialize import save_arrays, load_arrays

__all__ = [
    "Tensor", "Parameter", "no_grad", "is_grad_enabled", "check_finite",
    "conv2d", "conv_transpose2d", "maxpool2d", "avgpool_global", "relu",
    "sigmoid", "batchnorm2d", "linear", "add", "scale", "concat_channels",
    "upsample_nearest", "sigmoid_cross_entropy_pixelwise", "l2_pixelwise", "l2_z",
    "Gaussian", "Zeros", "Constant", "BilinearUpsample", "Identity",
    "bilinear_filter", "bilinear_deconv_weight", "materialize",
    "SGD", "LrSchedule", "freeze", "unfreeze",
    "save_arrays", "load_arrays",
]
