"""Minimal tensor algebra with reverse-mode autodiff, backed by numpy arrays."""

from .ops import (
    LAYERNORM_EPS,
    avg_pool,
    concat,
    embedding,
    exp,
    gelu,
    layernorm,
    matmul,
    mse,
    silu,
    softmax_attention,
    split,
    sqrt,
    take_slice,
    tanh,
    upsample_nearest,
    where,
)
from .tensor import (
    GradTape,
    NonFiniteError,
    Tensor,
    backward,
    detect_anomaly,
    is_grad_enabled,
    no_grad,
    tensor,
    zero_grad,
)

__all__ = [
    "LAYERNORM_EPS", "GradTape", "NonFiniteError", "Tensor", "avg_pool", "backward", "concat",
    "detect_anomaly", "embedding", "exp", "gelu", "is_grad_enabled", "layernorm", "matmul", "mse",
    "no_grad", "silu", "softmax_attention", "split", "sqrt", "take_slice", "tanh", "tensor", "upsample_nearest",
    "where", "zero_grad",
]
