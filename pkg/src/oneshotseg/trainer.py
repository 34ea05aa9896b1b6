"""Episodic training: losses, SGD step with poly schedule, training loop."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint
from .data import Episode, SplitConfig, sample_episode
from .heads import LossBundle, combine_losses, cross_entropy_mask
from .model import ModelConfig, OneShotSegNet, build_model

log = logging.getLogger(__name__)

REFERENCE_LR0 = 2.5e-4
REFERENCE_MOMENTUM = 0.9
REFERENCE_WEIGHT_DECAY = 1e-4
REFERENCE_POLY_POWER = 0.9
REFERENCE_LAMBDA_MCL = 0.1
# From-scratch toy encoder; REFERENCE_LR0 assumes an ImageNet-pretrained VGG-16 backbone.
DESK_LR0 = 5e-3
DESK_EPISODES = 20_000


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = DESK_EPISODES
    lr0: float = DESK_LR0
    momentum: float = REFERENCE_MOMENTUM
    weight_decay: float = REFERENCE_WEIGHT_DECAY
    poly_power: float = REFERENCE_POLY_POWER
    batch_size: int = 1
    lambda_mcl: float = REFERENCE_LAMBDA_MCL
    seed: int = 0
    use_pff: bool = True
    use_mcl: bool = True
    use_spt: bool = True
    freeze_encoder: bool = False
    loss_reduction: str = "mean"
    hflip: bool = True
    log_every: int = 100
    val_every: int = 5000
    val_episodes: int = 50

    def validate(self) -> None:
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.lr0 <= 0 or self.poly_power <= 0:
            raise ValueError("lr0 and poly_power must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lambda_mcl < 0:
            raise ValueError("lambda_mcl must be nonnegative")
        if self.loss_reduction not in ("mean", "sum"):
            raise ValueError(f"unknown loss_reduction {self.loss_reduction!r}")

    @property
    def steps(self) -> int:
        return max(self.episodes // self.batch_size, 1)

    @property
    def arm(self) -> str:
        parts = [name for name, on in (("mcl", self.use_mcl), ("pff", self.use_pff), ("spt", self.use_spt)) if on]
        name = "+".join(parts) if parts else "base"
        return name + ("+frozen" if self.freeze_encoder else "")


def poly_lr(iteration: int, total: int, lr0: float, power: float = REFERENCE_POLY_POWER) -> float:
    """``lr0 * (1 - iteration / total) ** power``."""
    if total <= 0:
        raise ValueError("total must be positive")
    if not 0 <= iteration <= total:
        raise ValueError(f"iteration {iteration} outside 0..{total}")
    if iteration == total:
        return 0.0
    return lr0 * (1.0 - iteration / total) ** power


def make_optimizer(model: OneShotSegNet, config: TrainConfig) -> torch.optim.SGD:
    """SGD with momentum and coupled L2 weight decay over the trainable parameters."""
    for p in model.encoder.parameters():
        p.requires_grad_(not config.freeze_encoder)
    params = list(model.head_parameters()) if config.freeze_encoder else list(model.parameters())
    return torch.optim.SGD(params, lr=config.lr0, momentum=config.momentum, weight_decay=config.weight_decay)


def episode_tensors(episode: Episode, rng: np.random.Generator | None = None, hflip: bool = False, dtype=torch.float32):
    """Stack (support, query) images, binary masks and label maps as tensors.

    With ``hflip`` each image is flipped together with its masks with
    probability 1/2, drawing from ``rng``.
    """
    (s_img, s_mask), = episode.supports[:1]
    s_lab = episode.support_labels[0] if episode.support_labels else s_mask
    q_lab = episode.query_label if episode.query_label is not None else episode.query_mask
    pairs = [[s_img, s_mask, s_lab], [episode.query_image, episode.query_mask, q_lab]]
    if hflip:
        for pair in pairs:
            if rng.random() < 0.5:
                pair[:] = [a[..., ::-1] for a in pair]
    images = torch.from_numpy(np.stack([np.ascontiguousarray(p[0]) for p in pairs])).to(dtype)
    masks = torch.from_numpy(np.stack([np.ascontiguousarray(p[1]) for p in pairs]).astype(np.int64))
    labels = torch.from_numpy(np.stack([np.ascontiguousarray(p[2]) for p in pairs]).astype(np.int64))
    return images, masks, labels


def episode_losses(model: OneShotSegNet, images, masks, labels, config: TrainConfig):
    """Return ``(total, l_q, l_s, l_seg)`` tensors for one (support, query) pair."""
    size = tuple(images.shape[-2:])
    red = config.loss_reduction
    if config.freeze_encoder:
        with torch.no_grad():
            feats = model.features(images)
    else:
        feats = model.features(images)
    proto = model.prototype(feats[:1], masks[:1])
    zero = feats.new_zeros(())
    if config.use_spt:
        logits = model.segment(feats, proto.expand(2, -1), size)
        l_s = cross_entropy_mask(logits[:1], masks[:1], reduction=red)
        l_q = cross_entropy_mask(logits[1:], masks[1:], reduction=red)
    else:
        logits = model.segment(feats[1:], proto, size)
        l_q = cross_entropy_mask(logits, masks[1:], reduction=red)
        l_s = zero
    if config.use_mcl:
        mc = model.multiclass(feats, size)
        l_seg = cross_entropy_mask(mc, model.multiclass_target(labels), reduction=red)
    else:
        l_seg = zero
    return combine_losses(l_q, l_s, l_seg, config.lambda_mcl), l_q, l_s, l_seg


def train_step(
    model: OneShotSegNet,
    optimizer: torch.optim.Optimizer,
    episodes: Episode | Sequence[Episode],
    config: TrainConfig,
    lr: float,
    rng: np.random.Generator | None = None,
) -> LossBundle:
    """One optimizer update; several episodes are gradient-accumulated (averaged)."""
    if isinstance(episodes, Episode):
        episodes = [episodes]
    model.train()
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    dtype = next(model.parameters()).dtype
    sums = np.zeros(4)
    for ep in episodes:
        if ep.shots != 1:
            raise ValueError("training episodes must be 1-shot")
        images, masks, labels = episode_tensors(ep, rng, config.hflip and rng is not None, dtype)
        total, l_q, l_s, l_seg = episode_losses(model, images, masks, labels, config)
        (total / len(episodes)).backward()
        sums += [float(t.detach()) for t in (l_q, l_s, l_seg, total)]
    optimizer.step()
    l_q, l_s, l_seg, total = sums / len(episodes)
    return LossBundle(l_q, l_s, l_seg, total, config.lambda_mcl)


def model_config_for(split: SplitConfig, config: TrainConfig, base: ModelConfig | None = None) -> ModelConfig:
    base = base or ModelConfig()
    return replace(base, use_pff=config.use_pff, train_classes=tuple(split.train_classes))


def run_training(
    dataset,
    split: SplitConfig,
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    progress: Callable[[int, LossBundle], None] | None = None,
) -> Checkpoint:
    """Train from scratch for ``config.episodes`` episodes and return the checkpoint.

    Deterministic for a fixed ``config.seed``: the model init, the episode
    stream, the flips and the validation episodes each draw from their own
    seeded generator.
    """
    from .inference import evaluate

    config.validate()
    mcfg = model_config_for(split, config, model_config)
    model = build_model(mcfg, seed=config.seed)
    optimizer = make_optimizer(model, config)
    ep_rng = np.random.default_rng([config.seed, 1])
    aug_rng = np.random.default_rng([config.seed, 2])

    trace: list[list[float]] = []
    val: list[dict] = []
    steps = config.steps
    t0 = time.perf_counter()
    for step in range(steps):
        batch = [sample_episode(dataset, split, "train", 1, ep_rng) for _ in range(config.batch_size)]
        lr = poly_lr(step, steps, config.lr0, config.poly_power)
        bundle = train_step(model, optimizer, batch, config, lr, aug_rng)
        trace.append([bundle.l_q, bundle.l_s, bundle.l_seg, bundle.total])
        done = (step + 1) * config.batch_size
        if progress is not None:
            progress(done, bundle)
        if config.log_every and (step + 1) % max(config.log_every // config.batch_size, 1) == 0:
            recent = np.mean([t[3] for t in trace[-config.log_every :]])
            log.info("episode %d/%d loss %.4f lr %.2e (%.0fs)", done, config.episodes, recent, lr, time.perf_counter() - t0)
        if config.val_every and done % config.val_every == 0 and config.val_episodes:
            report = evaluate(
                model, dataset, split, phase="train", episodes=config.val_episodes, seed=config.seed + 7919 * done
            )
            val.append({"episode": done, "mean_iou": report.mean_iou, "binary_iou": report.binary_iou})
            log.info("episode %d validation mean-IoU %.4f (train classes)", done, report.mean_iou)
    model.eval()
    return Checkpoint(
        model=model,
        model_config=mcfg,
        train_config=asdict(config),
        split_index=split.split_index,
        episode=steps * config.batch_size,
        history={"loss_trace": trace, "validation": val},
    )
