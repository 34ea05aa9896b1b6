import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from oneshotseg.prototype import (
    EmptyMaskError,
    Prototype,
    broadcast_prototype,
    fuse_prototypes,
    interp_matrix,
    masked_average_pool,
    upsample_bilinear,
)


def double_loop_pool(features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Upsample explicitly, then accumulate over (h, w) one pixel at a time."""
    up = F.interpolate(torch.from_numpy(features)[None], size=mask.shape, mode="bilinear", align_corners=False)[0].numpy()
    acc = np.zeros(features.shape[0])
    count = 0.0
    for h in range(mask.shape[0]):
        for w in range(mask.shape[1]):
            if mask[h, w]:
                acc += mask[h, w] * up[:, h, w]
                count += mask[h, w]
    return acc / count


@pytest.mark.parametrize("out_size,in_size", [(64, 8), (32, 8), (8, 2), (8, 4), (5, 3)])
def test_upsample_matches_torch_interpolate(out_size, in_size):
    x = torch.randn(2, 3, in_size, in_size + 1, dtype=torch.float64)
    ours = upsample_bilinear(x, (out_size, out_size + 3))
    ref = F.interpolate(x, size=(out_size, out_size + 3), mode="bilinear", align_corners=False)
    assert torch.allclose(ours, ref, atol=1e-12)
    assert torch.allclose(interp_matrix(out_size, in_size, torch.float64).sum(1), torch.ones(out_size, dtype=torch.float64))


def test_pool_matches_double_loop_oracle(rng):
    feats = rng.normal(size=(64, 8, 8))
    mask = (rng.random((64, 64)) < 0.3).astype(np.float64)
    ours = masked_average_pool(torch.from_numpy(feats), torch.from_numpy(mask)).numpy()
    np.testing.assert_allclose(ours, double_loop_pool(feats, mask), atol=1e-9)


def test_pool_constant_features():
    feats = torch.arange(4, dtype=torch.float64)[:, None, None].expand(4, 8, 8)
    mask = torch.zeros(32, 32)
    mask[3:9, 20:30] = 1
    assert torch.allclose(masked_average_pool(feats, mask), torch.arange(4, dtype=torch.float64))


def test_pool_single_pixel():
    feats = torch.randn(6, 8, 8, dtype=torch.float64)
    mask = torch.zeros(64, 64)
    mask[17, 42] = 1
    up = F.interpolate(feats[None], size=(64, 64), mode="bilinear", align_corners=False)[0]
    assert torch.allclose(masked_average_pool(feats, mask), up[:, 17, 42], atol=1e-12)


def test_pool_empty_mask_raises():
    with pytest.raises(EmptyMaskError):
        masked_average_pool(torch.randn(3, 4, 4), torch.zeros(16, 16))


def test_pool_batched_matches_single(rng):
    feats = torch.from_numpy(rng.normal(size=(3, 5, 4, 4)))
    masks = torch.from_numpy((rng.random((3, 16, 16)) < 0.5).astype(np.float64))
    masks[:, 0, 0] = 1
    batched = masked_average_pool(feats, masks)
    for i in range(3):
        assert torch.allclose(batched[i], masked_average_pool(feats[i], masks[i]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(-5, 5, allow_nan=False))
def test_pool_permutation_scaling_and_bounds(seed, alpha):
    r = np.random.default_rng(seed)
    feats = torch.from_numpy(r.normal(size=(5, 4, 4)))
    mask = torch.from_numpy((r.random((16, 16)) < 0.4).astype(np.float64))
    mask[r.integers(16), r.integers(16)] = 1
    p = masked_average_pool(feats, mask)

    up = F.interpolate(feats[None], size=(16, 16), mode="bilinear", align_corners=False)[0].reshape(5, -1)
    perm = torch.from_numpy(r.permutation(256))
    flat_mask = mask.reshape(-1)
    permuted = (up[:, perm] * flat_mask[perm]).sum(1) / flat_mask.sum()
    assert torch.allclose(p, permuted, atol=1e-9)

    assert torch.allclose(masked_average_pool(alpha * feats, mask), alpha * p, atol=1e-9)
    assert bool((p >= feats.amin(dim=(1, 2)) - 1e-12).all()) and bool((p <= feats.amax(dim=(1, 2)) + 1e-12).all())


def test_broadcast_shapes_and_values():
    v = torch.randn(7, dtype=torch.float64)
    assert torch.equal(broadcast_prototype(v, 1, 1)[:, 0, 0], v)
    b = broadcast_prototype(v, 8, 8)
    assert b.shape == (7, 8, 8)
    assert torch.equal(b, v[:, None, None].expand(7, 8, 8))
    with pytest.raises(ValueError):
        broadcast_prototype(v, 0, 3)


def test_pool_of_broadcast_is_identity(rng):
    v = torch.from_numpy(rng.normal(size=16))
    mask = torch.from_numpy((rng.random((64, 64)) < 0.2).astype(np.float64))
    mask[0, 0] = 1
    assert torch.allclose(masked_average_pool(broadcast_prototype(v, 8, 8), mask), v, atol=1e-6)


def _proto(v, source="support"):
    return Prototype(torch.as_tensor(v, dtype=torch.float64), source, 3)


def test_fuse_idempotent_and_plain_average(rng):
    p = _proto(rng.normal(size=8))
    q = _proto(rng.normal(size=8), "pseudo")
    assert torch.equal(fuse_prototypes([p, p]).vector, p.vector)
    fused = fuse_prototypes([p, q])
    assert torch.allclose(fused.vector, (p.vector + q.vector) / 2)
    assert fused.source == "fused"
    assert fuse_prototypes([p, p]).source == "kshot"
    assert torch.equal(fuse_prototypes([p]).vector, p.vector)


def test_fuse_matches_mean_oracle(rng):
    vs = rng.normal(size=(5, 32))
    fused = fuse_prototypes([_proto(v) for v in vs])
    np.testing.assert_allclose(fused.vector.numpy(), vs.mean(0), atol=1e-9)


def test_fuse_commutative_and_weighted(rng):
    a, b, c = (_proto(rng.normal(size=4)) for _ in range(3))
    assert torch.allclose(fuse_prototypes([a, b, c]).vector, fuse_prototypes([c, a, b]).vector, atol=1e-12)
    w = fuse_prototypes([a, b], [0.25, 0.75]).vector
    assert torch.allclose(w, 0.25 * a.vector + 0.75 * b.vector)


def test_fuse_errors(rng):
    with pytest.raises(ValueError):
        fuse_prototypes([])
    with pytest.raises(ValueError):
        fuse_prototypes([_proto(np.zeros(3)), _proto(np.zeros(4))])
    with pytest.raises(ValueError):
        fuse_prototypes([_proto(np.zeros(3)), _proto(np.zeros(3))], [0.6, 0.6])
    with pytest.raises(ValueError):
        fuse_prototypes([_proto(np.zeros(3)), Prototype(torch.zeros(3, dtype=torch.float64), "pseudo", 9)])
