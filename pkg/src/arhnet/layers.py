"""Convolution parameter blocks shared by the ARH module and the networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, conv3d, parameter


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int | None = None

    def __call__(self, x):
        padding = self.weight.shape[2] // 2 if self.padding is None else self.padding
        return conv3d(x, self.weight, self.bias, self.stride, padding)

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def named_parameters(self, prefix):
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}

    @classmethod
    def from_params(cls, params, prefix, stride=1, padding=None):
        return cls(params[f"{prefix}.weight"], params[f"{prefix}.bias"], stride, padding)


def init_conv(c_in, c_out, kernel, rng, zero=False, stride=1, padding=None):
    """Weights ~ U(-a, a) with a = sqrt(1 / fan_in), fan_in = c_in * k^3; bias zero."""
    shape = (c_out, c_in, kernel, kernel, kernel)
    if zero:
        weight = np.zeros(shape)
    else:
        bound = np.sqrt(1.0 / (c_in * kernel ** 3))
        weight = rng.uniform(-bound, bound, size=shape)
    return ConvParams(parameter(weight), parameter(np.zeros(c_out)), stride, padding)
