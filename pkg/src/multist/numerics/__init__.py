from .gradcheck import check_gradients, finite_diff_grad, relative_error
from .optim import OptimizerState, adadelta_step, adam_step, clip_grad_norm, make_optimizer, optimizer_step
from .tensor import Tensor, ShapeError, backward, no_grad, record
from . import tensor as ops

__all__ = [
    "Tensor", "ShapeError", "backward", "no_grad", "record", "ops",
    "finite_diff_grad", "check_gradients", "relative_error",
    "OptimizerState", "make_optimizer", "adadelta_step", "adam_step", "optimizer_step", "clip_grad_norm",
]
