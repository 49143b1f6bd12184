from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import finite_diff_grad, relative_error
from .ops import (
    activation,
    add,
    batch_norm,
    bce_loss,
    bilinear_sample,
    combined_loss,
    conv2d,
    deform_conv2d,
    global_avg_pool,
    linear,
    max_rows,
    maxpool2d,
    relu,
    scale,
    sigmoid,
    upsample_bilinear,
)
from .optim import Adam, AdamState, adam_step, observe_validation
from .tensor import Tensor, no_grad

__all__ = [
    "Adam", "AdamState", "Tensor", "activation", "adam_step", "add", "batch_norm",
    "bce_loss", "bilinear_sample", "combined_loss", "conv2d", "deform_conv2d",
    "finite_diff_grad", "global_avg_pool", "linear", "load_checkpoint", "max_rows",
    "maxpool2d", "no_grad", "observe_validation", "relative_error", "relu",
    "save_checkpoint", "scale", "sigmoid", "upsample_bilinear",
]
