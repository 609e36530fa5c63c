from crossflow.core.optim import Adam, AdamState, adam_update
from crossflow.core.serialize import load_tensors, save_tensors
from crossflow.core.tensor import (
    Tensor,
    add,
    as_tensor,
    avg_pool2d,
    backward,
    concat,
    conv2d,
    exp,
    gelu,
    getitem,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    power,
    precision,
    relu,
    reshape,
    sigmoid,
    softmax,
    softplus,
    sqrt,
    sub,
    swapaxes,
    tanh,
    transpose,
    tsum,
)

__all__ = [
    "Adam",
    "AdamState",
    "Tensor",
    "adam_update",
    "add",
    "as_tensor",
    "avg_pool2d",
    "backward",
    "concat",
    "conv2d",
    "exp",
    "gelu",
    "getitem",
    "layer_norm",
    "linear",
    "load_tensors",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "power",
    "precision",
    "relu",
    "reshape",
    "save_tensors",
    "sigmoid",
    "softmax",
    "softplus",
    "sqrt",
    "sub",
    "swapaxes",
    "tanh",
    "transpose",
    "tsum",
]
