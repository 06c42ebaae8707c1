"""Layer objects: seeded initialization + parameter bookkeeping over tensor ops."""
from __future__ import annotations

import numpy as np

from .tensor import Parameter, Tensor, conv2d, dense, leaky_relu, mean_pool, sigmoid

__all__ = ["Conv2d", "Dense", "uniform_fan_in", "LEAKY_ALPHA"]

LEAKY_ALPHA = 0.01


def uniform_fan_in(shape, fan_in: int, rng: np.random.Generator, dtype,
                   gain: float = 1.0, fan_out: int | None = None) -> np.ndarray:
    """Centered uniform init scaled by fan-in.

    gain=sqrt(2) approximates He init for leaky-relu layers; passing fan_out
    switches to the Xavier-style sqrt(6/(fan_in+fan_out)) bound for
    sigmoid/linear heads.
    """
    if fan_out is None:
        limit = gain * np.sqrt(3.0 / fan_in)
    else:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2d:
    """Square-kernel convolution layer with bias."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, init: str = "he",
                 dtype=np.float32):
        if padding is None:
            padding = (k - 1) // 2
        self.stride = stride
        self.padding = padding
        fan_in = c_in * k * k
        if init == "he":
            w = uniform_fan_in((c_out, c_in, k, k), fan_in, rng, dtype, gain=np.sqrt(2.0))
        else:
            w = uniform_fan_in((c_out, c_in, k, k), fan_in, rng, dtype,
                               fan_out=c_out * k * k)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros((c_out, 1, 1), dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.stride, self.padding) + self.bias

    def parameters(self):
        return [self.weight, self.bias]


class Dense:
    """Affine layer for [N, d_in] inputs."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 init: str = "xavier", dtype=np.float32):
        if init == "he":
            w = uniform_fan_in((d_in, d_out), d_in, rng, dtype, gain=np.sqrt(2.0))
        else:
            w = uniform_fan_in((d_in, d_out), d_in, rng, dtype, fan_out=d_out)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return dense(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]
