"""Minimal NHWC tensor library with reverse-mode differentiation and Adam."""

from bssgan.tensor.core import (
    LOG_CLAMP,
    Tape,
    Tensor,
    as_tensor,
    backward,
    check_mode,
    concat,
    exp,
    flatten,
    index,
    log,
    mean,
    no_tape,
    pick,
    power,
    reshape,
    sum,
)
from bssgan.tensor.ops import (
    activation,
    batch_norm,
    conv2d,
    dense,
    dropout,
    leaky_relu,
    relu,
    softmax,
    tanh,
    transposed_conv2d,
)
from bssgan.tensor.optim import Adam, AdamState, adam_step
from bssgan.tensor.checkpoint import load_checkpoint, read_manifest, save_checkpoint

__all__ = [
    "LOG_CLAMP", "Tape", "Tensor", "as_tensor", "backward", "check_mode", "concat", "exp",
    "flatten", "index", "log", "mean", "no_tape", "pick", "power", "reshape", "sum",
    "activation", "batch_norm", "conv2d", "dense", "dropout", "leaky_relu", "relu",
    "softmax", "tanh", "transposed_conv2d", "Adam", "AdamState", "adam_step",
    "load_checkpoint", "read_manifest", "save_checkpoint",
]
