"""Minimal numpy-backed neural-network stack: autodiff tensor, transformer
layers, Adam, and finite-difference gradient checking."""

from lpsynth.nn.gradcheck import finite_diff_check
from lpsynth.nn.layers import (
    Conv1dHalf,
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    TransformerLayer,
    causal_mask,
    sinusoidal_positions,
)
from lpsynth.nn.optim import Adam
from lpsynth.nn.tensor import (
    Tensor,
    attention,
    concat,
    conv1d_half,
    default_dtype,
    embedding,
    layer_norm,
    log_softmax_np,
    no_grad,
    set_default_dtype,
    softmax,
    softmax_cross_entropy,
    stop_gradient,
    using_dtype,
)

__all__ = [
    "Adam",
    "Conv1dHalf",
    "Embedding",
    "FeedForward",
    "LayerNorm",
    "Linear",
    "Module",
    "MultiHeadAttention",
    "Tensor",
    "TransformerLayer",
    "attention",
    "causal_mask",
    "concat",
    "conv1d_half",
    "default_dtype",
    "embedding",
    "finite_diff_check",
    "layer_norm",
    "log_softmax_np",
    "no_grad",
    "set_default_dtype",
    "sinusoidal_positions",
    "softmax",
    "softmax_cross_entropy",
    "stop_gradient",
    "using_dtype",
]
