"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The training-based criteria (6 to 11) share checkpoints trained for 20,000
episodes on split 0 of the default synthetic corpus.  They are cached under
``$ONESHOTSEG_CACHE`` (default ``<repo>/.acceptance_cache``), keyed by the
training configuration and a hash of the modules that influence training, so
the suite retrains automatically whenever that code changes.  The recorded
wall-clock time of each training is kept next to the checkpoint.

Run ``python3 tests/test_acceptance.py --warm`` to fill the cache ahead of a
pytest run.
"""
from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from dataclasses import asdict
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest
import torch

from acceptance_log import record
from oneshotseg.checkpoint import load_checkpoint, save_checkpoint
from oneshotseg.data import GenConfig, generate_dataset, make_splits, sample_episode
from oneshotseg.encoder import EncoderConfig
from oneshotseg.gradcheck import check_gradients, sample_coordinates
from oneshotseg.inference import (
    evaluate,
    segment_kshot,
    segment_prototype_fused,
    segment_support_guided,
)
from oneshotseg.metrics import aggregate_runs, confusion, iou, write_report_csv
from oneshotseg.model import ModelConfig, build_model
from oneshotseg.prototype import masked_average_pool
from oneshotseg.trainer import TrainConfig, episode_losses, episode_tensors, model_config_for, poly_lr, run_training

torch.set_num_threads(1)

REPO = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("ONESHOTSEG_CACHE", REPO / ".acceptance_cache"))
TRAINING_MODULES = ("data", "encoder", "prototype", "fusion", "heads", "model", "trainer", "checkpoint")

SEEDS = (0, 1, 2)
EPISODES = 20_000
EVAL_EPISODES = 200
ARMS = {
    "full": {},
    "base": dict(use_mcl=False, use_pff=False, use_spt=False),
    "no_mcl": dict(use_mcl=False),
    "no_pff": dict(use_pff=False),
    "no_spt": dict(use_spt=False),
}


# ---------------------------------------------------------------- shared state


@lru_cache(maxsize=None)
def corpus():
    return generate_dataset(GenConfig())


def split0():
    return make_splits(16, 0)


def _source_hash() -> str:
    h = hashlib.sha256()
    pkg = REPO / "src" / "oneshotseg"
    for name in TRAINING_MODULES:
        h.update((pkg / f"{name}.py").read_bytes())
    return h.hexdigest()


def train_config(arm: str, seed: int) -> TrainConfig:
    return TrainConfig(episodes=EPISODES, seed=seed, **ARMS[arm])


@lru_cache(maxsize=None)
def trained(arm: str, seed: int):
    """Checkpoint for (arm, seed), from the cache or trained now."""
    cfg = train_config(arm, seed)
    key = json.dumps({"train": asdict(cfg), "data": asdict(GenConfig()), "split": 0, "src": _source_hash()}, sort_keys=True)
    digest = hashlib.sha256(key.encode()).hexdigest()[:16]
    path = CACHE / f"{arm}-seed{seed}-{digest}.ckpt"
    meta_path = path.with_suffix(".json")
    if path.exists() and meta_path.exists():
        return load_checkpoint(path), json.loads(meta_path.read_text())
    CACHE.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    ckpt = run_training(corpus(), split0(), cfg)
    meta = {"arm": arm, "seed": seed, "train_seconds": time.perf_counter() - t0, "episodes": cfg.episodes}
    save_checkpoint(ckpt, path)
    meta_path.write_text(json.dumps(meta, indent=1))
    return load_checkpoint(path), meta


@lru_cache(maxsize=None)
def score(arm: str, seed: int, **kwargs) -> float:
    ckpt, _ = trained(arm, seed)
    return evaluate(ckpt.model, corpus(), split0(), episodes=EVAL_EPISODES, seed=100 + seed, **kwargs).mean_iou


def _fmt(values) -> str:
    return "[" + ", ".join(f"{v:.4f}" for v in values) + "]"


# ---------------------------------------------------------------- criteria 1-5


def double_loop_pool(features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    up = torch.nn.functional.interpolate(
        torch.from_numpy(features)[None], size=mask.shape, mode="bilinear", align_corners=False
    )[0].numpy()
    acc = np.zeros(features.shape[0])
    count = 0
    for h in range(mask.shape[0]):
        for w in range(mask.shape[1]):
            if mask[h, w]:
                acc += up[:, h, w]
                count += 1
    return acc / count


def test_c01_pooling_matches_oracle():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        feats = rng.normal(size=(64, 8, 8))
        mask = rng.random((64, 64)) < rng.uniform(0.02, 0.9)
        mask[rng.integers(64), rng.integers(64)] = True
        ours = masked_average_pool(torch.from_numpy(feats).float(), torch.from_numpy(mask)).double().numpy()
        worst = max(worst, float(np.abs(ours - double_loop_pool(feats, mask)).max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 10
    record(1, "pooling oracle", ok, f"max abs err {worst:.2e} (<= 1e-6), {elapsed:.1f}s (< 10s)")
    assert ok


def enumerate_pair(pred: np.ndarray, gt: np.ndarray):
    tp = fp = fn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        tp += p and g
        fp += p and not g
        fn += g and not p
    return tp, fp, fn


def test_c02_metrics_match_enumeration():
    rng = np.random.default_rng(102)
    codes = rng.choice(2**32, size=5000, replace=False)
    bits = ((codes[:, None] >> np.arange(32)) & 1).astype(np.uint8)
    mismatches = asym = 0
    for row in bits:
        pred, gt = row[:16].reshape(4, 4), row[16:].reshape(4, 4)
        tp, fp, fn = enumerate_pair(pred, gt)
        c = confusion(pred, gt)
        expect = 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)
        mismatches += (c.tp, c.fp, c.fn) != (tp, fp, fn) or iou(c) != expect
        asym += iou(c) != iou(confusion(gt, pred))
    ok = mismatches == 0 and asym == 0
    record(2, "metrics oracle", ok, f"5000 pairs, {mismatches} mismatches, {asym} asymmetric")
    assert ok


def test_c03_full_objective_gradients():
    t0 = time.perf_counter()
    ds = generate_dataset(GenConfig(num_classes=16, images_per_class=4, image_size=16, seed=5))
    split = make_splits(16, 0)
    mcfg = ModelConfig(encoder=EncoderConfig(channel_widths=(4, 8, 16, 16)), train_classes=split.train_classes)
    model = build_model(mcfg, seed=0, dtype=torch.float64)
    cfg = TrainConfig(lambda_mcl=0.1, use_mcl=True, use_pff=True, use_spt=True, hflip=False)
    ep = sample_episode(ds, split, "train", 1, np.random.default_rng(3))
    images, masks, labels = episode_tensors(ep, dtype=torch.float64)
    params = list(model.parameters())
    loss_fn = lambda: episode_losses(model, images, masks, labels, cfg)[0]  # noqa: E731
    rng = np.random.default_rng(103)
    # On 2x2 feature maps many gradients are exactly zero, so half of the
    # coordinates are drawn from the scalars with a nonzero gradient.
    loss_fn().backward()
    live = torch.cat([(p.grad != 0).reshape(-1) for p in params]).nonzero().reshape(-1).numpy()
    offsets = np.cumsum([0] + [p.numel() for p in params])
    picked = rng.choice(live, size=12, replace=False)
    coords = sample_coordinates(params, 12, rng)
    coords += [(int(t), int(f - offsets[t])) for f in picked for t in [np.searchsorted(offsets, f, side="right") - 1]]
    results = check_gradients(loss_fn, params, coords)
    elapsed = time.perf_counter() - t0
    worst = max(r[2] for r in results)
    nonzero = sum(r[0] != 0 for r in results)
    ok = worst < 1e-3 and elapsed < 60 and len(results) >= 10
    record(3, "gradient check", ok,
           f"{len(results)} params ({nonzero} with nonzero gradient), max rel err {worst:.2e} (< 1e-3), "
           f"{elapsed:.1f}s (< 60s)")
    assert ok


def test_c04_poly_schedule():
    lr0, total = 0.01, 1000
    exact = poly_lr(0, total, lr0) == lr0 and poly_lr(total, total, lr0) == 0.0
    its = np.linspace(0, total, 12)[1:-1].round().astype(int)
    errs = [abs(poly_lr(int(i), total, lr0) - lr0 * (1 - i / total) ** 0.9) for i in its]
    ok = exact and max(errs) <= 1e-12
    record(4, "poly schedule", ok, f"endpoints exact: {exact}, max interior err {max(errs):.1e} (<= 1e-12)")
    assert ok


def _desk_run(tmp: Path):
    ckpt = run_training(corpus(), split0(), TrainConfig(episodes=2000, seed=0, val_every=0))
    report = evaluate(ckpt.model, corpus(), split0(), episodes=200, seed=0)
    path = write_report_csv(tmp / "report.csv", [report], aggregate_runs([report]))
    return ckpt.history["loss_trace"], path.read_bytes()


def test_c05_determinism(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    trace_a, csv_a = _desk_run(tmp_path / "a")
    trace_b, csv_b = _desk_run(tmp_path / "b")
    ok = trace_a == trace_b and csv_a == csv_b
    record(5, "determinism", ok, f"loss traces identical: {trace_a == trace_b}, report CSVs identical: {csv_a == csv_b}")
    assert ok


# ---------------------------------------------------------------- criteria 6-11


def test_c06_learning_signal():
    trained_scores = [score("full", s) for s in SEEDS]
    random_scores = []
    for s in SEEDS:
        model = build_model(model_config_for(split0(), train_config("full", s)), seed=s)
        random_scores.append(evaluate(model, corpus(), split0(), episodes=EVAL_EPISODES, seed=100 + s).mean_iou)
    seconds = sum(trained("full", s)[1]["train_seconds"] for s in SEEDS)
    gap = float(np.mean(trained_scores) - np.mean(random_scores))
    ok = gap >= 0.15
    record(6, "learning signal", ok,
           f"trained {_fmt(trained_scores)} vs random {_fmt(random_scores)}, gap {gap:.4f} (>= 0.15); "
           f"3 trainings took {seconds / 60:.1f} min (target < 30)")
    assert ok


def test_c07_ablation_direction():
    means = {arm: float(np.mean([score(arm, s, prototype="support") for s in SEEDS])) for arm in ARMS}
    ok = means["full"] >= means["base"] and all(means["full"] >= means[a] - 0.01 for a in ("no_mcl", "no_pff", "no_spt"))
    detail = ", ".join(f"{a} {v:.4f}" for a, v in means.items())
    record(7, "ablation direction", ok, f"{detail} (full >= base, full >= single ablations - 0.01)")
    assert ok


def test_c08_prototype_fusion_direction():
    fused = [score("full", s, prototype="fused") for s in SEEDS]
    support = [score("full", s, prototype="support") for s in SEEDS]
    wins = sum(f > s for f, s in zip(fused, support))
    ok = np.mean(fused) >= np.mean(support) - 0.005 and wins >= 2
    record(8, "prototype fusion", ok, f"fused {_fmt(fused)} vs support {_fmt(support)}, fused wins {wins}/3 (>= 2)")
    assert ok


def test_c09_kshot():
    k1 = [score("full", s, prototype="fused", shots=1) for s in SEEDS]
    k5 = [score("full", s, prototype="fused", shots=5) for s in SEEDS]
    k1_support = [score("full", s, prototype="support", shots=1) for s in SEEDS]
    k5_support = [score("full", s, prototype="support", shots=5, include_pseudo=False) for s in SEEDS]

    model = trained("full", 0)[0].model
    rng = np.random.default_rng(109)
    identical = True
    for _ in range(30):
        ep = sample_episode(corpus(), split0(), "test", 1, rng)
        for plain, dedicated in ((segment_kshot(model, ep, False), segment_support_guided(model, ep)),
                                 (segment_kshot(model, ep, True), segment_prototype_fused(model, ep))):
            identical &= torch.equal(plain.logits, dedicated.logits) and np.array_equal(plain.mask, dedicated.mask)
    monotone = np.mean(k5) >= np.mean(k1) - 0.005
    ok = monotone and identical
    record(9, "k-shot", ok,
           f"k=5 {np.mean(k5):.4f} vs k=1 {np.mean(k1):.4f} (fused; support-only {np.mean(k5_support):.4f} vs "
           f"{np.mean(k1_support):.4f}), k=1 reductions bit-identical: {identical}")
    assert ok


def test_c10_weak_annotations():
    dense = np.mean([score("full", s, annotation="dense") for s in SEEDS])
    scribble = np.mean([score("full", s, annotation="scribble") for s in SEEDS])
    bbox = np.mean([score("full", s, annotation="bbox") for s in SEEDS])
    ok = dense - scribble <= 0.10 and dense - bbox <= 0.10
    record(10, "weak annotations", ok,
           f"dense {dense:.4f}, scribble {scribble:.4f} (drop {dense - scribble:.4f}), bbox {bbox:.4f} "
           f"(drop {dense - bbox:.4f}), limit 0.10")
    assert ok


def test_c11_checkpoint_round_trip(tmp_path):
    ckpt = trained("full", 0)[0]
    path = save_checkpoint(ckpt, tmp_path / "rt.ckpt")
    again = load_checkpoint(path)
    before, after = [], []
    evaluate(ckpt.model, corpus(), split0(), episodes=50, seed=11, details=before)
    evaluate(again.model, corpus(), split0(), episodes=50, seed=11, details=after)
    masks = all(np.array_equal(a[1], b[1]) for a, b in zip(before, after))
    ious = [a[0].iou for a in before] == [b[0].iou for b in after]
    ok = masks and ious and len(before) == len(after) == 50
    record(11, "checkpoint round trip", ok, f"50 episodes, masks identical: {masks}, IoUs identical: {ious}")
    assert ok


def warm() -> None:
    for seed in SEEDS:
        for arm in ARMS:
            _, meta = trained(arm, seed)
            print(f"{arm} seed {seed}: {meta['train_seconds'] / 60:.1f} min", flush=True)


if __name__ == "__main__":
    if "--warm" in sys.argv:
        warm()
    else:
        sys.exit(pytest.main([__file__, "-v", *sys.argv[1:]]))
