"""Minimal dense-array neural-network toolkit: autodiff, layers, losses, optimizer."""

from .autodiff import (
    DiffArray,
    ShapeError,
    add,
    asdiff,
    bilinear_gather,
    concat,
    constant,
    conv2d,
    default_dtype,
    detach,
    div,
    exp,
    gather_rows,
    gelu,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    scatter_rows,
    segment_mean,
    set_default_dtype,
    softmax,
    sub,
    sum_,
    take_pairs,
    transpose,
    upsample_nearest2,
)
from .checkpoint import apply_checkpoint, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, finite_diff_check, finite_diff_spot
from .layers import (
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
    collect_parameters,
    linear_forward,
    mha_forward,
)
from .losses import cross_entropy_loss, lovasz_softmax_loss, segmentation_loss
from .optim import AdamW, OptimError, ScheduleConfig, cosine_lr

__all__ = [
    "Parameter",
    "Module",
    "Linear",
    "LayerNorm",
    "FeedForward",
    "MultiHeadAttention",
    "linear_forward",
    "mha_forward",
    "collect_parameters",
    "cross_entropy_loss",
    "lovasz_softmax_loss",
    "segmentation_loss",
    "AdamW",
    "OptimError",
    "ScheduleConfig",
    "cosine_lr",
    "save_checkpoint",
    "load_checkpoint",
    "apply_checkpoint",
    "DiffArray",
    "ShapeError",
    "GradCheckReport",
    "finite_diff_check",
    "finite_diff_spot",
    "asdiff",
    "constant",
    "detach",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "concat",
    "reshape",
    "transpose",
    "gather_rows",
    "take_pairs",
    "scatter_rows",
    "segment_mean",
    "relu",
    "gelu",
    "exp",
    "log",
    "softmax",
    "layer_norm",
    "mean",
    "sum_",
    "bilinear_gather",
    "conv2d",
    "upsample_nearest2",
    "set_default_dtype",
    "default_dtype",
]
