"""Masked average pooling, prototype fusion and prototype broadcasting."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import torch


class EmptyMaskError(ValueError):
    """Raised when a prototype is requested from a mask with no foreground."""


@lru_cache(maxsize=64)
def _interp_matrix(out_size: int, in_size: int, dtype: torch.dtype) -> torch.Tensor:
    # half-pixel-centre bilinear weights, identical to F.interpolate(align_corners=False)
    scale = in_size / out_size
    m = torch.zeros(out_size, in_size, dtype=torch.float64)
    for i in range(out_size):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(src), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m.to(dtype)


def interp_matrix(out_size: int, in_size: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Row-stochastic ``[out_size, in_size]`` 1-D bilinear interpolation matrix."""
    return _interp_matrix(out_size, in_size, dtype)


def upsample_bilinear(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Separable bilinear resize of ``[..., h, w]`` to ``[..., H, W]``.

    Numerically matches ``F.interpolate(mode="bilinear", align_corners=False)``
    but its backward pass is two small matmuls.
    """
    ah = interp_matrix(size[0], x.shape[-2], x.dtype)
    aw = interp_matrix(size[1], x.shape[-1], x.dtype)
    return torch.matmul(torch.matmul(ah, x), aw.t())


def masked_average_pool(features: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Prototype of the masked region of bilinearly upsampled features.

    ``features`` is ``[C, h, w]`` or ``[N, C, h, w]``; ``mask`` is ``[H, W]`` or
    ``[N, H, W]`` at image resolution.  The features are upsampled to the
    mask size and averaged over the foreground pixels.  Because upsampling is
    linear this is evaluated by pulling the mask back to feature resolution
    (``A_h^T M A_w``), which gives the same vector without materialising the
    upsampled map.
    """
    batched = features.dim() == 4
    if not batched:
        features, mask = features.unsqueeze(0), mask.unsqueeze(0)
    mask = mask.to(features.dtype)
    area = mask.sum(dim=(-2, -1))
    if bool((area <= 0).any()):
        raise EmptyMaskError("mask has no foreground pixels")
    ah = interp_matrix(mask.shape[-2], features.shape[-2], features.dtype)
    aw = interp_matrix(mask.shape[-1], features.shape[-1], features.dtype)
    weights = torch.matmul(torch.matmul(ah.t(), mask), aw)  # [N, h, w]
    proto = torch.einsum("nchw,nhw->nc", features, weights) / area[:, None]
    return proto if batched else proto[0]


def broadcast_prototype(vector: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Tile a ``[C]`` or ``[N, C]`` prototype to ``[..., C, h, w]``."""
    if h < 1 or w < 1:
        raise ValueError(f"broadcast size must be positive, got {h}x{w}")
    return vector[..., None, None].expand(*vector.shape, h, w)


@dataclass
class Prototype:
    vector: torch.Tensor
    source: str  # support | pseudo | fused | kshot
    class_id: int = -1


def fuse_prototypes(protos: Sequence[Prototype], weights: Sequence[float] | None = None) -> Prototype:
    """Weighted sum of prototypes (uniform average by default)."""
    if not protos:
        raise ValueError("cannot fuse an empty sequence of prototypes")
    dims = {tuple(p.vector.shape) for p in protos}
    if len(dims) != 1:
        raise ValueError(f"prototype dimensions differ: {sorted(dims)}")
    class_ids = {p.class_id for p in protos}
    if len(class_ids) != 1:
        raise ValueError(f"prototypes belong to different classes: {sorted(class_ids)}")
    if weights is None:
        weights = [1.0 / len(protos)] * len(protos)
    if len(weights) != len(protos):
        raise ValueError("one weight per prototype is required")
    if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
        raise ValueError("weights must be nonnegative and sum to 1")
    vector = weights[0] * protos[0].vector
    for w, p in zip(weights[1:], protos[1:]):
        vector = vector + w * p.vector
    source = "kshot" if all(p.source == "support" for p in protos) else "fused"
    return Prototype(vector, source, protos[0].class_id)
