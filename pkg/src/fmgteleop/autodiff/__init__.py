"""Small deterministic reverse-mode kernel covering the layers the regressors use."""

from .gradcheck import GradCheckReport, grad_check
from .kernels import BACKEND
from .ops import (add, affine, batchnorm, concat, conv1d_dilated_causal, conv2d, conv2d_transposed,
                  dense, index_axis1, lstm_cell, mse_loss, relu, reshape, slice_last, transpose)
from .optim import ParameterStore, adam_step
from .tensor import Tensor

__all__ = [
    "BACKEND", "GradCheckReport", "ParameterStore", "Tensor", "adam_step", "add", "affine",
    "batchnorm", "concat", "conv1d_dilated_causal", "conv2d", "conv2d_transposed", "dense",
    "grad_check", "index_axis1", "lstm_cell", "mse_loss", "relu", "reshape", "slice_last",
    "transpose",
]
