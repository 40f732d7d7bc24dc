"""Small numpy neural-network kernel: layers, backprop, Adam, checkpoints."""
from .functional import (
    cross_entropy_grad,
    cross_entropy_loss,
    cross_entropy_with_grad,
    log_softmax,
    max_confidence,
    softmax,
)
from .layers import (
    Conv2d,
    Dense,
    Flatten,
    GlobalAvgPool,
    Layer,
    MaxPool2d,
    Parameter,
    ReLU,
    conv2d_forward,
    layer_from_spec,
)
from .network import Sequential, init_layers, layer_shapes, layer_table
from .optim import Adam, adam_step, cosine_annealing_lr, xavier_init

__all__ = [
    "Adam", "Conv2d", "Dense", "Flatten", "GlobalAvgPool", "Layer", "MaxPool2d",
    "Parameter", "ReLU", "Sequential", "adam_step", "conv2d_forward",
    "cosine_annealing_lr", "cross_entropy_grad", "cross_entropy_loss",
    "cross_entropy_with_grad", "init_layers", "layer_from_spec", "layer_shapes",
    "layer_table", "log_softmax", "max_confidence", "softmax", "xavier_init",
]
