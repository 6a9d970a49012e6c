"""Small trainable convolutional pyramid used in place of a pretrained backbone."""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import nn

from . import numerics as nx
from .errors import IndivisibleInput

DEFAULT_CHANNELS = (8, 16, 32, 32)


def default_channels(n: int) -> tuple[int, ...]:
    """Channel schedule for ``n`` levels: 8, 16, 32, then 32 repeated."""
    return tuple(min(8 * 2**i, 32) for i in range(n))


def init_weight(*shape: int, fan_in: int, gain: float = 1.0) -> nn.Parameter:
    w = torch.randn(*shape, dtype=nx.DTYPE) * (gain / math.sqrt(fan_in))
    return nn.Parameter(w)


def zeros(*shape: int) -> nn.Parameter:
    return nn.Parameter(torch.zeros(*shape, dtype=nx.DTYPE))


class Backbone(nn.Module):
    """``n`` stride-2 blocks of 3x3 conv followed by relu.

    Any module mapping an H x W x 3 image to a list of ``n`` maps whose
    spatial extents halve at every level can stand in for this one.
    """

    def __init__(self, channels: Sequence[int] = DEFAULT_CHANNELS, in_channels: int = 3):
        super().__init__()
        if len(channels) < 2 or any(c <= 0 for c in channels):
            raise ValueError(f"need at least two positive channel counts, got {tuple(channels)}")
        self.channels = tuple(int(c) for c in channels)
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        c_prev = in_channels
        for c in self.channels:
            self.weights.append(init_weight(3, 3, c_prev, c, fan_in=9 * c_prev, gain=math.sqrt(2.0)))
            self.biases.append(zeros(c))
            c_prev = c

    @property
    def n_levels(self) -> int:
        return len(self.channels)

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        h, w = image.shape[:2]
        step = 2**self.n_levels
        if h % step or w % step:
            raise IndivisibleInput(f"{h}x{w} input is not divisible by 2^{self.n_levels}={step}")
        levels = []
        x = image
        for weight, bias in zip(self.weights, self.biases):
            x = nx.relu(nx.conv2d(x, weight, bias, stride=2, padding=1))
            levels.append(x)
        return levels


def extract_features(image: torch.Tensor, backbone: Backbone) -> list[torch.Tensor]:
    return backbone(image)
