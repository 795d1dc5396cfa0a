"""Residual bottleneck and hourglass building blocks.

The bottleneck is the preactivation variant: BN-ReLU precedes each
convolution and the skip path adds the raw input, so a block whose final
convolution is zero is exactly the identity.  The hourglass is a
symmetric encoder-decoder: each level pools, recurses, and comes back up
through a learnable stride-2 deconvolution initialized as bilinear
upsampling, adding a skip branch computed at the incoming resolution.
"""

from __future__ import annotations

import numpy as np

from ..autograd import Tensor, add, maxpool2d, relu
from ..errors import ConfigError
from .layers import BatchNorm2d, Conv2d, ConvTranspose2d, Module

__all__ = ["Bottleneck", "Hourglass"]


class Bottleneck(Module):
    """1x1 reduce, 3x3, 1x1 expand with preactivation and a skip path.

    Spatial stride (if any) sits on the 3x3.  When the input and output
    shapes differ the skip is a 1x1 projection applied to the
    preactivated input, per the preactivation design.
    """

    def __init__(self, in_channels: int, mid_channels: int, out_channels: int,
                 stride: int = 1, dtype=np.float64):
        super().__init__()
        self.in_channels = in_channels
        self.mid_channels = mid_channels
        self.out_channels = out_channels
        self.stride = stride
        self.bn1 = BatchNorm2d(in_channels, dtype=dtype)
        self.conv1 = Conv2d(in_channels, mid_channels, 1, bias=False, dtype=dtype)
        self.bn2 = BatchNorm2d(mid_channels, dtype=dtype)
        self.conv2 = Conv2d(mid_channels, mid_channels, 3, stride=stride, padding=1,
                            bias=False, dtype=dtype)
        self.bn3 = BatchNorm2d(mid_channels, dtype=dtype)
        self.conv3 = Conv2d(mid_channels, out_channels, 1, bias=False, dtype=dtype)
        if in_channels != out_channels or stride != 1:
            self.proj = Conv2d(in_channels, out_channels, 1, stride=stride,
                               bias=False, dtype=dtype)
        else:
            self.proj = None

    def forward(self, x: Tensor) -> Tensor:
        pre = relu(self.bn1(x))
        out = self.conv1(pre)
        out = self.conv2(relu(self.bn2(out)))
        out = self.conv3(relu(self.bn3(out)))
        skip = x if self.proj is None else self.proj(pre)
        return add(out, skip)


class Hourglass(Module):
    """Recursive encoder-decoder at constant width.

    ``depth`` counts pooling levels; input spatial size must be divisible
    by 2**depth.  Output matches the input shape.
    """

    def __init__(self, depth: int, channels: int, dtype=np.float64):
        super().__init__()
        if depth < 1:
            raise ConfigError(f"hourglass depth must be >= 1, got {depth}")
        self.depth = depth
        self.channels = channels
        mid = max(channels // 2, 1)
        self.skip = Bottleneck(channels, mid, channels, dtype=dtype)
        self.down = Bottleneck(channels, mid, channels, dtype=dtype)
        if depth > 1:
            self.inner: Module = Hourglass(depth - 1, channels, dtype=dtype)
        else:
            self.inner = Bottleneck(channels, mid, channels, dtype=dtype)
        self.up = Bottleneck(channels, mid, channels, dtype=dtype)
        self.deconv = ConvTranspose2d(channels, channels, kernel=4, stride=2,
                                      padding=1, bias=False, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2], x.shape[3]
        if h % 2 != 0 or w % 2 != 0:
            raise ConfigError(
                f"hourglass level needs even spatial dims, got {h}x{w}"
            )
        branch = self.skip(x)
        low = self.down(maxpool2d(x, (2, 2), (2, 2)))
        low = self.inner(low)
        low = self.up(low)
        return add(self.deconv(low), branch)
