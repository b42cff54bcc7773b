"""Parameterized layers."""

from __future__ import annotations

import math

import numpy as np

from .ops import conv2d
from .tensor import Tensor


class Conv2d:
    """Same-padded conv with fan-in scaled uniform init.

    Weights draw from ``U(-s, s)`` with ``s = sqrt(6 / ((1 + a^2) fan_in))``,
    the He bound for a leaky ReLU of slope ``a``; biases start at zero.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 slope: float = 0.2, dtype=np.float64, name: str = "conv"):
        fan_in = in_ch * kernel * kernel
        s = math.sqrt(6.0 / ((1.0 + slope ** 2) * fan_in))
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.weight = Tensor(rng.uniform(-s, s, (out_ch, in_ch, kernel, kernel)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype), requires_grad=True)
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def named_parameters(self) -> dict[str, Tensor]:
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}

    @property
    def n_params(self) -> int:
        return self.weight.data.size + self.bias.data.size
