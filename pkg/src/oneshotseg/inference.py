"""Support-guided, prototype-fused and k-shot inference plus the evaluation protocol."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import Episode, SplitConfig, sample_episode, weaken_annotation
from .metrics import MetricsReport, aggregate_runs, build_report, confusion, iou
from .prototype import Prototype, fuse_prototypes

PROTOTYPE_MODES = ("support", "pseudo", "fused")
ANNOTATIONS = ("dense", "scribble", "bbox")


@dataclass
class PredMask:
    mask: np.ndarray  # uint8 [H, W]
    logits: torch.Tensor  # [2, H, W]
    pass_index: int
    fallback: bool = False
    prototype: Prototype | None = None


def logits_to_mask(logits: torch.Tensor) -> np.ndarray:
    """Foreground where its logit is strictly larger; ties go to background."""
    return (logits[1] > logits[0]).to(torch.uint8).numpy()


def _dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def _features(model, image: np.ndarray) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(image)).to(_dtype(model))[None]
    return model.features(x)


@torch.no_grad()
def _predict(model, feats: torch.Tensor, proto: Prototype, size, pass_index: int) -> PredMask:
    logits = model.segment(feats, proto.vector[None], size)[0]
    return PredMask(logits_to_mask(logits), logits, pass_index, prototype=proto)


@torch.no_grad()
def support_prototypes(model, episode: Episode) -> list[Prototype]:
    protos = []
    for image, mask in episode.supports:
        feats = _features(model, image)
        m = torch.from_numpy(np.ascontiguousarray(mask))[None]
        protos.append(Prototype(model.prototype(feats, m)[0], "support", episode.target_class))
    return protos


@torch.no_grad()
def pseudo_prototype(model, query_feats: torch.Tensor, first: PredMask, class_id: int) -> Prototype:
    m = torch.from_numpy(first.mask)[None]
    return Prototype(model.prototype(query_feats, m)[0], "pseudo", class_id)


def _two_pass(model, episode: Episode, combine) -> PredMask:
    model.eval()
    supports = support_prototypes(model, episode)
    q = _features(model, episode.query_image)
    size = tuple(episode.query_image.shape[-2:])
    first = _predict(model, q, fuse_prototypes(supports), size, 1)
    if combine is None:
        return first
    if not first.mask.any():
        return replace(first, fallback=True)
    pseudo = pseudo_prototype(model, q, first, episode.target_class)
    return _predict(model, q, combine(supports, pseudo), size, 2)


def _require_one_shot(episode: Episode) -> None:
    if episode.shots != 1:
        raise ValueError(f"expected a 1-shot episode, got k={episode.shots}")


def segment_support_guided(model, episode: Episode) -> PredMask:
    """Single pass guided by the support prototype."""
    _require_one_shot(episode)
    return _two_pass(model, episode, None)


def segment_prototype_fused(model, episode: Episode) -> PredMask:
    """Pass 1 with the support prototype, pass 2 with the average of support and pseudo prototypes."""
    _require_one_shot(episode)
    return _two_pass(model, episode, lambda supports, pseudo: fuse_prototypes([*supports, pseudo]))


def segment_pseudo_only(model, episode: Episode) -> PredMask:
    """Pass 2 guided by the query pseudo-prototype alone."""
    _require_one_shot(episode)
    return _two_pass(model, episode, lambda supports, pseudo: pseudo)


def segment_kshot(model, episode: Episode, include_pseudo: bool = False) -> PredMask:
    """Average the k support prototypes; optionally add the pseudo-prototype (k+1 average)."""
    if episode.shots < 1:
        raise ValueError("k-shot inference needs at least one support")
    combine = (lambda supports, pseudo: fuse_prototypes([*supports, pseudo])) if include_pseudo else None
    return _two_pass(model, episode, combine)


def segment(model, episode: Episode, prototype: str = "fused", include_pseudo: bool = False) -> PredMask:
    if episode.shots > 1:
        return segment_kshot(model, episode, include_pseudo or prototype == "fused")
    if prototype == "support":
        return segment_support_guided(model, episode)
    if prototype == "pseudo":
        return segment_pseudo_only(model, episode)
    if prototype == "fused":
        return segment_prototype_fused(model, episode)
    raise ValueError(f"unknown prototype mode {prototype!r}")


def weaken_episode(episode: Episode, annotation: str, rng: np.random.Generator) -> Episode:
    """Replace the support masks with scribbles or boxes; the query is untouched."""
    if annotation == "dense":
        return episode
    supports = [(img, weaken_annotation(mask, annotation, rng)) for img, mask in episode.supports]
    return replace(episode, supports=supports)


@dataclass
class EpisodeRecord:
    episode: int
    class_id: int
    iou: float
    pass_index: int
    fallback: bool
    support_ids: tuple
    query_id: int


def evaluate(
    model,
    dataset,
    split: SplitConfig,
    phase: str = "test",
    episodes: int = 200,
    seed: int = 0,
    prototype: str = "fused",
    shots: int = 1,
    include_pseudo: bool = False,
    annotation: str = "dense",
    accumulate: bool = True,
    details: list | None = None,
) -> MetricsReport:
    """One evaluation run of ``episodes`` episodes drawn with ``seed``.

    Episode sampling and annotation weakening use separate generators, so
    arms that differ only in prototype mode or annotation see the same
    episodes.  Pass a list as ``details`` to collect per-episode records and
    predictions.
    """
    if annotation not in ANNOTATIONS:
        raise ValueError(f"unknown annotation {annotation!r}")
    was_training = model.training
    model.eval()
    ep_rng = np.random.default_rng([seed, 11])
    weak_rng = np.random.default_rng([seed, 12])
    classes = split.test_classes if phase == "test" else split.train_classes
    records = []
    for i in range(episodes):
        ep = sample_episode(dataset, split, phase, shots, ep_rng)
        ep = weaken_episode(ep, annotation, weak_rng)
        pred = segment(model, ep, prototype, include_pseudo)
        records.append((pred.mask, ep.query_mask, ep.target_class))
        if details is not None:
            details.append(
                (
                    EpisodeRecord(i, ep.target_class, iou(confusion(pred.mask, ep.query_mask)), pred.pass_index,
                                  pred.fallback, ep.support_ids, ep.query_id),
                    pred.mask,
                    ep,
                )
            )
    model.train(was_training)
    return build_report(records, classes, accumulate, split_index=split.split_index, seed=seed)


def evaluate_runs(model, dataset, split: SplitConfig, runs: int = 3, episodes: int = 200, seed: int = 0, **kwargs):
    """Run the evaluation ``runs`` times with seeds ``seed .. seed+runs-1``; return (per-run, aggregate)."""
    reports = [evaluate(model, dataset, split, episodes=episodes, seed=seed + r, **kwargs) for r in range(runs)]
    return reports, aggregate_runs(reports)


def export_predictions(details: list, out_dir) -> None:
    """Write each predicted mask as an 8-bit PNG (0/1) plus ``episodes.jsonl`` records."""
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    with open(out / "episodes.jsonl", "w") as fh:
        for record, mask, _ in details:
            name = f"masks/{record.episode:05d}.png"
            Image.fromarray(mask.astype(np.uint8), mode="L").save(out / name)
            row = asdict(record)
            row["support_ids"] = list(row["support_ids"])
            row["mask"] = name
            fh.write(json.dumps(row, sort_keys=True) + "\n")
