from .functional import conv2d, conv_output_shape, gru_cell, gru_sequence, linear, mse_loss
from .optim import AdamState, NonFiniteGradientError, Parameter, adam_step, clip_grad_norm, he_init
from .tensor import Tensor, relu, sigmoid, tanh

__all__ = [
    "AdamState", "NonFiniteGradientError", "Parameter", "Tensor", "adam_step", "clip_grad_norm",
    "conv2d", "conv_output_shape", "gru_cell", "gru_sequence", "he_init", "linear", "mse_loss",
    "relu", "sigmoid", "tanh",
]
