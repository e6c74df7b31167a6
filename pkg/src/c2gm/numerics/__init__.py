"""Minimal dense-tensor engine with reverse-mode differentiation."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .functional import (
    attention,
    conv2d,
    depth_to_space,
    group_norm,
    instance_norm,
    linear,
    mse_loss,
    resample_bicubic,
    resample_bicubic_array,
    space_to_depth,
    upsample_nearest,
)
from .gradcheck import GradCheckError, grad_check, module_grad_check
from .nn import Attention, Conv2d, GroupNorm, Linear, Module, Parameter
from .optim import AdamW
from .tensor import (
    ContractViolation,
    NonFiniteError,
    Tensor,
    as_tensor,
    concat,
    grad_enabled,
    matmul,
    no_grad,
    require,
    stack,
    zeros,
)

__all__ = [
    "AdamW", "Attention", "CheckpointError", "ContractViolation", "Conv2d", "GradCheckError", "GroupNorm",
    "Linear", "Module", "NonFiniteError", "Parameter", "Tensor", "as_tensor", "attention", "concat",
    "conv2d", "depth_to_space", "grad_check", "grad_enabled", "group_norm", "instance_norm", "linear",
    "load_checkpoint", "matmul", "module_grad_check", "mse_loss", "no_grad", "require", "resample_bicubic",
    "resample_bicubic_array", "save_checkpoint", "space_to_depth", "stack", "upsample_nearest", "zeros",
]
