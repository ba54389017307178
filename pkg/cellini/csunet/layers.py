from typing import Optional

import numpy as np

from cellini.csunet       import ops
from cellini.csunet.base  import Module
from cellini.csunet.tensor import Parameter, Tensor
from cellini.csunet.types import NormMode


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv3d(Module):

    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator,
                 padding: int = 0, bias: bool = True):
        super().__init__()
        self.padding = padding
        fan_in = in_channels * kernel ** 3
        self.weight = Parameter(he_normal(rng, (out_channels, in_channels, kernel, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def zero_(self):
        """ zero weight and bias, making the layer output identically zero """
        self.weight.data.fill(0)
        if self.bias is not None:
            self.bias.data.fill(0)

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv3d(x, self.weight, self.bias, padding=self.padding)


class Norm3d(Module):
    """
    Batch or instance normalisation with a learnt per-channel affine. Batch mode
    keeps running statistics as non-trainable parameters.
    """

    def __init__(self, channels: int, mode: NormMode = NormMode.batch, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.mode, self.momentum, self.eps = NormMode(mode), momentum, eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        if self.mode == NormMode.batch:
            self.running_mean = Parameter(np.zeros(channels), requires_grad=False)
            self.running_var = Parameter(np.ones(channels), requires_grad=False)

    def forward(self, x: Tensor) -> Tensor:
        if self.mode == NormMode.instance:
            return ops.instancenorm3d(x, self.gamma, self.beta, eps=self.eps)
        return ops.batchnorm3d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                               training=self.training, momentum=self.momentum, eps=self.eps)


class Linear(Module):

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Parameter(he_normal(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features))

    def zero_(self):
        self.weight.data.fill(0)
        self.bias.data.fill(0)

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)
