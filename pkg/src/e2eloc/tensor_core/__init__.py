from . import functional
from .functional import bilinear_sample, directional_max_pool, grad_scale, smooth_l1, softmax_cross_entropy
from .gradcheck import check_gradients, numerical_gradient, relative_error
from .nn import BatchNorm1d, BatchNorm2d, Conv2d, Linear, Module, Parameter, ResidualBlock
from .optim import SGD, Adam, step_lr
from .tensor import GraphError, Tensor, as_tensor, is_grad_enabled, no_grad

__all__ = [
    "Adam",
    "BatchNorm1d",
    "BatchNorm2d",
    "Conv2d",
    "GraphError",
    "Linear",
    "Module",
    "Parameter",
    "ResidualBlock",
    "SGD",
    "Tensor",
    "as_tensor",
    "bilinear_sample",
    "check_gradients",
    "directional_max_pool",
    "functional",
    "grad_scale",
    "is_grad_enabled",
    "no_grad",
    "numerical_gradient",
    "relative_error",
    "smooth_l1",
    "softmax_cross_entropy",
    "step_lr",
]
