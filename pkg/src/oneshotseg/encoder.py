"""Toy dilated convolutional encoder with output stride 8."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

OUTPUT_STRIDE = 8


@dataclass(frozen=True)
class EncoderConfig:
    channel_widths: tuple = (16, 32, 64, 64)
    strides: tuple = (2, 2, 2, 1)
    dilation_last_stage: int = 2
    in_channels: int = 3

    @property
    def feature_dim(self) -> int:
        return self.channel_widths[-1]

    def validate(self) -> None:
        if len(self.channel_widths) != len(self.strides):
            raise ValueError("one stride per stage is required")
        stride = 1
        for s in self.strides:
            stride *= s
        if stride != OUTPUT_STRIDE:
            raise ValueError(f"strides {self.strides} give output stride {stride}, expected {OUTPUT_STRIDE}")


def init_conv(conv: nn.Conv2d, generator: torch.Generator | None = None) -> None:
    """Fan-in scaled (He) normal weights and zero bias."""
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1] // conv.groups
    with torch.no_grad():
        conv.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=generator)
        if conv.bias is not None:
            conv.bias.zero_()


class Encoder(nn.Module):
    """Stacked 3x3 conv + ReLU stages; the last stage is dilated."""

    def __init__(self, config: EncoderConfig = EncoderConfig()):
        super().__init__()
        config.validate()
        self.config = config
        layers = []
        c_in = config.in_channels
        last = len(config.channel_widths) - 1
        for i, (c_out, stride) in enumerate(zip(config.channel_widths, config.strides)):
            d = config.dilation_last_stage if i == last else 1
            layers.append(nn.Conv2d(c_in, c_out, 3, stride=stride, padding=d, dilation=d))
            c_in = c_out
        self.stages = nn.ModuleList(layers)
        for conv in self.stages:
            init_conv(conv)

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        h, w = image.shape[-2:]
        if h % OUTPUT_STRIDE or w % OUTPUT_STRIDE:
            raise ValueError(f"image size {h}x{w} is not divisible by {OUTPUT_STRIDE}")
        x = image
        for conv in self.stages:
            x = F.relu(conv(x))
        return x


def encode(image: torch.Tensor, encoder: Encoder) -> torch.Tensor:
    """Features ``[C_feat, H/8, W/8]`` for a single ``[3, H, W]`` image (batched input also accepted)."""
    if image.dim() == 3:
        return encoder(image.unsqueeze(0))[0]
    return encoder(image)
