"""ASPP-style classifiers and the segmentation losses."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .data import IGNORE_INDEX
from .encoder import init_conv
from .prototype import upsample_bilinear


class ASPPClassifier(nn.Module):
    """Parallel dilated 3x3 convs (ReLU) summed, then a 1x1 projection to K classes.

    Logits are bilinearly resized to the requested output size.
    """

    def __init__(self, in_dim: int, num_classes: int, rates=(1, 2, 4), hidden: int | None = None):
        super().__init__()
        hidden = hidden or in_dim
        self.rates = tuple(rates)
        self.branches = nn.ModuleList(nn.Conv2d(in_dim, hidden, 3, padding=r, dilation=r) for r in self.rates)
        self.project = nn.Conv2d(hidden, num_classes, 1)
        for conv in self.branches:
            init_conv(conv)
        init_conv(self.project)

    @property
    def num_classes(self) -> int:
        return self.project.out_channels

    def forward(self, x: torch.Tensor, size: tuple[int, int] | None = None) -> torch.Tensor:
        z = 0
        for conv in self.branches:
            z = z + F.relu(conv(x))
        logits = self.project(z)
        if size is not None and tuple(size) != tuple(logits.shape[-2:]):
            logits = upsample_bilinear(logits, size)
        return logits


def classify_binary(fused: torch.Tensor, head: ASPPClassifier, size: tuple[int, int]) -> torch.Tensor:
    if fused.dim() == 3:
        return head(fused.unsqueeze(0), size)[0]
    return head(fused, size)


def classify_multiclass(features: torch.Tensor, head: ASPPClassifier, size: tuple[int, int]) -> torch.Tensor:
    if features.dim() == 3:
        return head(features.unsqueeze(0), size)[0]
    return head(features, size)


def cross_entropy_mask(
    logits: torch.Tensor,
    target: torch.Tensor,
    ignore_value: int = IGNORE_INDEX,
    reduction: str = "mean",
) -> torch.Tensor:
    """Pixel-wise softmax cross-entropy over non-ignored pixels.

    ``reduction="sum"`` is the literal pixel sum; ``"mean"`` divides by the
    number of non-ignored pixels.  A fully ignored target gives zero.
    """
    if logits.dim() == 3:
        logits, target = logits.unsqueeze(0), target.unsqueeze(0)
    target = target.long()
    k = logits.shape[1]
    valid = target != ignore_value
    bad = valid & ((target < 0) | (target >= k))
    if bool(bad.any()):
        raise ValueError(f"target values must lie in 0..{k - 1} or equal {ignore_value}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    total = F.cross_entropy(logits, target, ignore_index=ignore_value, reduction="sum")
    if reduction == "sum":
        return total
    count = valid.sum()
    return total / count if int(count) else total * 0.0


@dataclass
class LossBundle:
    l_q: float
    l_s: float
    l_seg: float
    total: float
    lambda_mcl: float


def combine_losses(l_q, l_s, l_seg, lambda_mcl: float):
    """``l_q + l_s + lambda_mcl * l_seg``; works on floats and tensors alike."""
    if lambda_mcl < 0:
        raise ValueError(f"lambda_mcl must be nonnegative, got {lambda_mcl}")
    return l_q + l_s + lambda_mcl * l_seg


def total_loss(l_q: float, l_s: float, l_seg: float, lambda_mcl: float) -> LossBundle:
    l_q, l_s, l_seg = float(l_q), float(l_s), float(l_seg)
    return LossBundle(l_q, l_s, l_seg, combine_losses(l_q, l_s, l_seg, lambda_mcl), float(lambda_mcl))
