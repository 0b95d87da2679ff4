from .archive import load_archive, save_archive
from .optim import OptimizerState, optimizer_step
from .params import MLP, Linear, ParamStore, glorot_uniform
from .tensor import (
    LN2,
    Tensor,
    as_tensor,
    concat,
    cross_entropy,
    linear,
    log,
    log_softmax_np,
    mean,
    no_grad,
    record,
    relu,
    softmax_cross_entropy,
    softmax_np,
    softplus,
    square,
    sum_,
    tanh,
)

__all__ = [
    "LN2",
    "Linear",
    "MLP",
    "OptimizerState",
    "ParamStore",
    "Tensor",
    "as_tensor",
    "concat",
    "cross_entropy",
    "glorot_uniform",
    "linear",
    "load_archive",
    "log",
    "log_softmax_np",
    "mean",
    "no_grad",
    "optimizer_step",
    "record",
    "relu",
    "save_archive",
    "softmax_cross_entropy",
    "softmax_np",
    "softplus",
    "square",
    "sum_",
    "tanh",
]
