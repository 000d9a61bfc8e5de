from .gradcheck import fd_check
from .ops import (cross_entropy, dropout, layer_norm, linear, linear_param_count, matmul, relu,
                  softmax)
from .optim import Adam, AdamState, adam_step
from .tensor import GradTape, ShapeError, Tensor, no_grad

__all__ = [
    "Adam", "AdamState", "GradTape", "ShapeError", "Tensor", "adam_step", "cross_entropy",
    "dropout", "fd_check", "layer_norm", "linear", "linear_param_count", "matmul", "no_grad",
    "relu", "softmax",
]
