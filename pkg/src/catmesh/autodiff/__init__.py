from . import ops
from .ops import (
    bilinear_sample,
    concat,
    conv_transpose2d,
    gelu,
    layer_norm,
    matmul,
    softmax,
    stack,
)
from .optim import AdamState, adam_step, cosine_lr
from .tape import Gradients, Tape, Tensor, as_tensor, backward

__all__ = [
    "ops", "Tensor", "Tape", "Gradients", "as_tensor", "backward",
    "matmul", "layer_norm", "softmax", "gelu", "conv_transpose2d", "bilinear_sample",
    "concat", "stack", "AdamState", "adam_step", "cosine_lr",
]
