"""Prototype/feature fusion: single-conv base fusion and pyramid feature fusion."""
from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

from .encoder import init_conv
from .prototype import broadcast_prototype, upsample_bilinear


def concat_prototype(features: torch.Tensor, proto: torch.Tensor) -> torch.Tensor:
    """Stack ``[N, C, h, w]`` features with the broadcast ``[N, C]`` prototype."""
    if proto.shape[-1] != features.shape[-3]:
        raise ValueError(f"prototype dim {proto.shape[-1]} does not match feature channels {features.shape[-3]}")
    h, w = features.shape[-2:]
    return torch.cat([features, broadcast_prototype(proto, h, w)], dim=-3)


class BaseFusion(nn.Module):
    """One 3x3 convolution (plus ReLU) over [features, prototype]."""

    def __init__(self, feature_dim: int, out_dim: int | None = None):
        super().__init__()
        self.conv = nn.Conv2d(2 * feature_dim, out_dim or feature_dim, 3, padding=1)
        init_conv(self.conv)

    @property
    def out_dim(self) -> int:
        return self.conv.out_channels

    def forward(self, features: torch.Tensor, proto: torch.Tensor) -> torch.Tensor:
        return F.relu(self.conv(concat_prototype(features, proto)))


class ResidualBlock(nn.Module):
    """Pre-activation bottleneck (1x1, 3x3, 1x1) with an identity skip."""

    def __init__(self, width: int, bottleneck: int):
        super().__init__()
        self.conv1 = nn.Conv2d(width, bottleneck, 1)
        self.conv2 = nn.Conv2d(bottleneck, bottleneck, 3, padding=1)
        self.conv3 = nn.Conv2d(bottleneck, width, 1)
        for conv in (self.conv1, self.conv2, self.conv3):
            init_conv(conv)

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.relu(x))
        h = self.conv2(F.relu(h))
        return self.conv3(F.relu(h))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.residual(x)


class PyramidFusion(nn.Module):
    """Pyramid feature fusion.

    concat(features, prototype) -> 3x3 reduction to ``width`` -> parallel 3x3
    convs at scales 1, 1/2, 1/4 -> upsample and sum -> two residual blocks.
    With ``feature_dim=512`` this is the 1024 -> 512 plan with (64, 64, 512)
    residual widths; the toy default is 128 -> 64 with (8, 8, 64).
    """

    scales = (1, 2, 4)

    def __init__(self, feature_dim: int, width: int | None = None, num_blocks: int = 2):
        super().__init__()
        width = width or feature_dim
        self.reduce = nn.Conv2d(2 * feature_dim, width, 3, padding=1)
        self.paths = nn.ModuleList(nn.Conv2d(width, width, 3, padding=1) for _ in self.scales)
        self.blocks = nn.ModuleList(ResidualBlock(width, max(width // 8, 1)) for _ in range(num_blocks))
        init_conv(self.reduce)
        for conv in self.paths:
            init_conv(conv)

    @property
    def out_dim(self) -> int:
        return self.reduce.out_channels

    def pyramid(self, x: torch.Tensor) -> torch.Tensor:
        """Sum of the three scale paths.  A side shorter than a pooling scale is pooled globally."""
        h, w = x.shape[-2:]
        kernels = [(min(s, h), min(s, w)) for s in self.scales]
        if any(h % kh or w % kw for kh, kw in kernels):
            raise ValueError(f"feature size {h}x{w} is not divisible by the pooling scales {self.scales}")
        out = 0
        for scale, conv, kernel in zip(self.scales, self.paths, kernels):
            y = F.avg_pool2d(x, kernel) if scale > 1 else x
            y = F.relu(conv(y))
            out = out + (upsample_bilinear(y, (h, w)) if scale > 1 else y)
        return out

    def forward(self, features: torch.Tensor, proto: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.reduce(concat_prototype(features, proto)))
        x = self.pyramid(x)
        for block in self.blocks:
            x = block(x)
        return x


def fuse_base(features: torch.Tensor, proto: torch.Tensor, module: BaseFusion) -> torch.Tensor:
    if features.dim() == 3:
        return module(features.unsqueeze(0), proto.unsqueeze(0))[0]
    return module(features, proto)


def fuse_pyramid(features: torch.Tensor, proto: torch.Tensor, module: PyramidFusion) -> torch.Tensor:
    if features.dim() == 3:
        return module(features.unsqueeze(0), proto.unsqueeze(0))[0]
    return module(features, proto)
