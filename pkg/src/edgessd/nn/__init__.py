from edgessd.nn.cost import CostEstimate, layer_cost, madds_ratio, reduction_factor, separable_cost, standard_cost
from edgessd.nn.layers import (
    BatchNormParams,
    ConvSpec,
    DSBlockParams,
    ShapeError,
    batch_norm,
    conv2d_forward,
    ds_block_forward,
    relu6,
    relu6_grad,
    same_padding,
)
from edgessd.nn.tape import GradientTape, backward

__all__ = [
    "BatchNormParams",
    "ConvSpec",
    "CostEstimate",
    "DSBlockParams",
    "GradientTape",
    "ShapeError",
    "backward",
    "batch_norm",
    "conv2d_forward",
    "ds_block_forward",
    "layer_cost",
    "madds_ratio",
    "reduction_factor",
    "relu6",
    "relu6_grad",
    "same_padding",
    "separable_cost",
    "standard_cost",
]
