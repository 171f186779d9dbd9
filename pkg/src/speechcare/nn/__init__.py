from speechcare.nn.autodiff import GradientTape, Parameter, Tensor, backward
from speechcare.nn.layers import (
    AttentionBlock,
    Dense,
    LayerNorm,
    Module,
    dense_forward,
    layer_norm,
    multi_head_attention,
    softmax,
)

__all__ = [
    "AttentionBlock",
    "Dense",
    "GradientTape",
    "LayerNorm",
    "Module",
    "Parameter",
    "Tensor",
    "backward",
    "dense_forward",
    "layer_norm",
    "multi_head_attention",
    "softmax",
]
