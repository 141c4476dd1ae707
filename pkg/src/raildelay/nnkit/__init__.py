"""Minimal differentiable-computation substrate for desk-scale models."""

from .tensor import (
    Tensor,
    absolute,
    as_tensor,
    check_finite,
    concatenate,
    exp,
    log,
    matmul,
    mul,
    power,
    take_rows,
    tensor_mean,
    tensor_sum,
    transpose,
)
from .nn import (
    AttentionParams,
    EncoderLayerParams,
    cross_entropy,
    dropout,
    encoder_layer,
    l1_masked_loss,
    layer_norm,
    linear,
    log_softmax,
    mse_loss,
    prelu,
    self_attention,
    softmax,
    xavier_uniform,
)
from .optim import Adam, AdamHyper, AdamState, adam_step
from .gradcheck import grad_check
from .checkpoint import load_arrays, save_arrays

__all__ = [
    "Tensor",
    "absolute",
    "as_tensor",
    "check_finite",
    "concatenate",
    "exp",
    "log",
    "matmul",
    "mul",
    "power",
    "take_rows",
    "tensor_mean",
    "tensor_sum",
    "transpose",
    "AttentionParams",
    "EncoderLayerParams",
    "cross_entropy",
    "dropout",
    "encoder_layer",
    "l1_masked_loss",
    "layer_norm",
    "linear",
    "log_softmax",
    "mse_loss",
    "prelu",
    "self_attention",
    "softmax",
    "xavier_uniform",
    "Adam",
    "AdamHyper",
    "AdamState",
    "adam_step",
    "grad_check",
    "load_arrays",
    "save_arrays",
]
