"""Confusion counts, IoU, split-level mean-IoU / binary-IoU and run aggregation."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass
class MetricsReport:
    per_class_iou: dict
    mean_iou: float
    binary_iou: float
    runs: int = 1
    episodes_per_run: int = 0
    per_class_counts: dict = field(default_factory=dict)
    split_index: int | None = None
    seed: int | None = None


def confusion(pred, gt, ignore: int | None = None) -> ConfusionCounts:
    """Foreground TP/FP/FN of binary ``pred`` against ``gt``; pixels where gt == ignore are skipped."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    valid = np.ones(gt.shape, bool) if ignore is None else gt != ignore
    p = (pred == 1) & valid
    g = (gt == 1) & valid
    return ConfusionCounts(int(np.sum(p & g)), int(np.sum(p & ~g)), int(np.sum(~p & g)))


def iou(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return c.tp / denom


def split_report(records: Iterable, mode: str = "mean", classes: Sequence[int] | None = None, accumulate: bool = True) -> dict:
    """Split-level IoU over ``(pred, gt, class_id)`` records.

    mean: per-class IoU from counts accumulated over all episodes of the
    class, then the unweighted mean over ``classes``.  binary: foreground
    (all classes merged) and background IoU, each accumulated over all
    episodes, then averaged.  ``accumulate=False`` averages per-episode IoUs
    instead of pooling counts.  A class with no episodes gets IoU NaN and is
    left out of the mean.
    """
    records = list(records)
    if mode == "mean":
        if classes is None:
            classes = sorted({int(r[2]) for r in records})
        counts = {int(c): ConfusionCounts() for c in classes}
        per_episode = {int(c): [] for c in classes}
        for pred, gt, cls in records:
            cls = int(cls)
            if cls not in counts:
                raise ValueError(f"class {cls} is not one of the evaluated classes {list(classes)}")
            c = confusion(pred, gt)
            counts[cls] = counts[cls] + c
            per_episode[cls].append(iou(c))
        if accumulate:
            per_class = {c: iou(counts[c]) if v else float("nan") for c, v in per_episode.items()}
        else:
            per_class = {c: float(np.mean(v)) if v else float("nan") for c, v in per_episode.items()}
        seen = [v for v in per_class.values() if not np.isnan(v)]
        mean = float(np.mean(seen)) if seen else float("nan")
        return {"per_class_iou": per_class, "per_class_counts": counts, "mean_iou": mean}
    if mode == "binary":
        fg, bg = ConfusionCounts(), ConfusionCounts()
        scores = []
        for pred, gt, _ in records:
            pred, gt = np.asarray(pred), np.asarray(gt)
            f = confusion(pred, gt)
            b = confusion(1 - pred, 1 - gt)
            fg, bg = fg + f, bg + b
            scores.append((iou(f) + iou(b)) / 2)
        value = (iou(fg) + iou(bg)) / 2 if accumulate else float(np.mean(scores))
        return {"binary_iou": value, "fg_counts": fg, "bg_counts": bg}
    raise ValueError(f"unknown mode {mode!r}")


def build_report(records: Sequence, classes: Sequence[int], accumulate: bool = True, **meta) -> MetricsReport:
    records = list(records)
    m = split_report(records, "mean", classes, accumulate)
    b = split_report(records, "binary", classes, accumulate)
    return MetricsReport(
        per_class_iou=m["per_class_iou"],
        mean_iou=m["mean_iou"],
        binary_iou=b["binary_iou"],
        episodes_per_run=len(records),
        per_class_counts=m["per_class_counts"],
        **meta,
    )


def _nanmean(values) -> float:
    values = [v for v in values if not np.isnan(v)]
    return float(np.mean(values)) if values else float("nan")


def aggregate_runs(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Average mean-IoU, binary-IoU and per-class IoU over runs."""
    if not reports:
        raise ValueError("no reports to aggregate")
    splits = {r.split_index for r in reports}
    if len(splits) > 1:
        raise ValueError(f"reports come from different splits: {splits}")
    classes = list(reports[0].per_class_iou)
    counts = {}
    for c in classes:
        total = ConfusionCounts()
        for r in reports:
            total = total + r.per_class_counts.get(c, ConfusionCounts())
        counts[c] = total
    return MetricsReport(
        per_class_iou={c: _nanmean([r.per_class_iou[c] for r in reports]) for c in classes},
        mean_iou=float(np.mean([r.mean_iou for r in reports])),
        binary_iou=float(np.mean([r.binary_iou for r in reports])),
        runs=sum(r.runs for r in reports),
        episodes_per_run=reports[0].episodes_per_run,
        per_class_counts=counts,
        split_index=reports[0].split_index,
        seed=reports[0].seed,
    )


CSV_COLUMNS = ("split", "class", "tp", "fp", "fn", "iou", "mean_iou", "binary_iou", "runs", "seed")


def report_rows(report: MetricsReport, seed_label=None) -> list[dict]:
    seed = report.seed if seed_label is None else seed_label
    rows = []
    for c, value in report.per_class_iou.items():
        n = report.per_class_counts.get(c, ConfusionCounts())
        rows.append(
            {
                "split": report.split_index,
                "class": c,
                "tp": n.tp,
                "fp": n.fp,
                "fn": n.fn,
                "iou": f"{value:.6f}",
                "mean_iou": f"{report.mean_iou:.6f}",
                "binary_iou": f"{report.binary_iou:.6f}",
                "runs": report.runs,
                "seed": seed,
            }
        )
    return rows


def write_report_csv(path: str | Path, runs: Sequence[MetricsReport], aggregate: MetricsReport) -> Path:
    """One row per (run, class) followed by the aggregated rows (seed column ``mean``)."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in runs:
            writer.writerows(report_rows(r))
        writer.writerows(report_rows(aggregate, seed_label="mean"))
    return path
