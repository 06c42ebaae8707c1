from .tensor import (
    Parameter,
    Tensor,
    add,
    assert_finite,
    backward,
    clip,
    concat,
    concat_channels,
    conv2d,
    dense,
    global_mean_pool,
    leaky_relu,
    log,
    matmul,
    mean,
    mean_pool,
    mul,
    power,
    reshape,
    sigmoid,
    softmax_cross_entropy,
    sum_,
    upsample2x,
)
from .layers import Conv2d, Dense, LEAKY_ALPHA, uniform_fan_in
from .optim import Adam
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Adam", "Conv2d", "Dense", "LEAKY_ALPHA", "Parameter", "Tensor",
    "add", "assert_finite", "backward", "clip", "concat", "concat_channels",
    "conv2d", "dense", "global_mean_pool", "leaky_relu", "load_checkpoint",
    "log", "matmul", "mean", "mean_pool", "mul", "power", "reshape",
    "save_checkpoint", "sigmoid", "softmax_cross_entropy", "sum_",
    "uniform_fan_in", "upsample2x",
]
