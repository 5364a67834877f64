"""Tensors, portable RNG, reverse-mode gradients, and Adam."""

import numpy as np

from diffcd.numerics.rng import Rng, standard_normal
from diffcd.numerics.tensor import (
    Tensor,
    abs_,
    add,
    as_tensor,
    backward,
    bce_with_logits,
    bilinear_warp,
    concat,
    conv2d,
    group_norm,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    scale,
    sigmoid,
    square,
    sub,
    sum_,
    take,
    tanh,
    upsample_nearest,
)
from diffcd.numerics.gradcheck import finite_diff_grad, max_relative_error
from diffcd.numerics.optim import Adam, AdamState, adam_step


def gaussian(rng: Rng, shape) -> Tensor:
    """I.i.d. standard normal tensor drawn with Box-Muller from ``rng``."""
    return Tensor(standard_normal(rng, shape))


__all__ = [
    "Adam", "AdamState", "Rng", "Tensor", "abs_", "adam_step", "add", "as_tensor",
    "backward", "bce_with_logits", "bilinear_warp", "concat", "conv2d",
    "finite_diff_grad", "gaussian", "group_norm", "matmul", "max_relative_error",
    "mean", "mul", "no_grad", "relu", "reshape", "scale", "sigmoid", "square",
    "standard_normal", "sub", "sum_", "take", "tanh", "upsample_nearest",
]
