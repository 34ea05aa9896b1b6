"""Central finite-difference checks for scalar functions of module parameters."""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import torch


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def sample_coordinates(params: Sequence[torch.Tensor], n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Pick ``n`` distinct (tensor index, flat index) pairs, uniformly over all scalars."""
    sizes = np.array([p.numel() for p in params])
    flat = rng.choice(int(sizes.sum()), size=n, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    for f in flat:
        t = int(np.searchsorted(offsets, f, side="right") - 1)
        out.append((t, int(f - offsets[t])))
    return out


def check_gradients(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    coords: Iterable[tuple[int, int]],
    eps: float = 1e-5,
) -> list[tuple[float, float, float]]:
    """Compare autograd against central differences at the given coordinates.

    Returns ``(analytic, numeric, relative_error)`` per coordinate.  ``loss_fn``
    must be deterministic; the parameters are restored afterwards.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    results = []
    with torch.no_grad():
        for t, i in coords:
            flat = params[t].view(-1)
            orig = flat[i].item()
            flat[i] = orig + eps
            plus = loss_fn().item()
            flat[i] = orig - eps
            minus = loss_fn().item()
            flat[i] = orig
            numeric = (plus - minus) / (2 * eps)
            analytic = grads[t].view(-1)[i].item()
            results.append((analytic, numeric, relative_error(analytic, numeric)))
    return results
