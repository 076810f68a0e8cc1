"""Residual CNN with manual forward/backward passes."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .layers import (
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    global_avg_pool_backward,
    global_avg_pool_forward,
    relu_backward,
    relu_forward,
    sigmoid_backward,
    sigmoid_forward,
)
from .network import (
    FreezeWarning,
    MiniResNet,
    NetworkSpec,
    Parameter,
    ResidualBlockSpec,
    network_forward,
    residual_block_backward,
    residual_block_forward,
    set_frozen,
)

__all__ = [
    "Checkpoint",
    "FreezeWarning",
    "MiniResNet",
    "NetworkSpec",
    "Parameter",
    "ResidualBlockSpec",
    "batchnorm_backward",
    "batchnorm_forward",
    "conv2d_backward",
    "conv2d_forward",
    "dense_backward",
    "dense_forward",
    "global_avg_pool_backward",
    "global_avg_pool_forward",
    "load_checkpoint",
    "network_forward",
    "relu_backward",
    "relu_forward",
    "residual_block_backward",
    "residual_block_forward",
    "save_checkpoint",
    "set_frozen",
    "sigmoid_backward",
    "sigmoid_forward",
]
