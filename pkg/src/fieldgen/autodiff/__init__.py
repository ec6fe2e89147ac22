from .gradcheck import grad_check
from .ops import (
    MASK_VALUE,
    conv2d,
    embedding,
    l1,
    layer_norm,
    mse,
    softmax,
    upsample_nearest,
)
from .optim import AdamW, OptimizerState, clip_grad_norm
from .tensor import (
    Tensor,
    as_tensor,
    concat,
    get_default_dtype,
    is_grad_enabled,
    matmul,
    no_grad,
    precision,
    stack,
    tensor,
)

__all__ = [
    "MASK_VALUE",
    "AdamW",
    "OptimizerState",
    "Tensor",
    "as_tensor",
    "clip_grad_norm",
    "concat",
    "conv2d",
    "embedding",
    "get_default_dtype",
    "grad_check",
    "is_grad_enabled",
    "l1",
    "layer_norm",
    "matmul",
    "mse",
    "no_grad",
    "precision",
    "softmax",
    "stack",
    "tensor",
    "upsample_nearest",
]
