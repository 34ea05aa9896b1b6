"""Static figures written next to the CSV outputs of the CLI."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update(
    {
        "figure.dpi": 110,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "font.size": 9,
    }
)


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss_curve(rows: Sequence[dict], path, title: str = "training loss") -> Path:
    """Loss components against episode; ``rows`` as written to loss.csv."""
    ep = [r["episode"] for r in rows]
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    for key, style in (("total", "-"), ("l_q", "--"), ("l_s", ":"), ("l_seg", "-.")):
        values = [r[key] for r in rows]
        if any(values):
            ax.plot(ep, values, style, label=key, lw=1.2)
    ax.set_xlabel("episode")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_per_class_iou(per_class: dict, mean_iou: float, path, title: str = "") -> Path:
    classes = list(per_class)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.bar([str(c) for c in classes], [per_class[c] for c in classes], color="#4c72b0")
    ax.axhline(mean_iou, color="k", lw=1, ls="--", label=f"mean-IoU {mean_iou:.3f}")
    ax.set_ylim(0, 1)
    ax.set_xlabel("class")
    ax.set_ylabel("IoU")
    ax.set_title(title)
    ax.legend(frameon=False, loc="upper right")
    return _save(fig, path)


def plot_examples(details: Sequence, path, n: int = 4) -> Path:
    """Support (with mask outline), query ground truth and prediction for the first ``n`` episodes."""
    n = min(n, len(details))
    fig, axes = plt.subplots(n, 3, figsize=(6, 2 * n), squeeze=False)
    for row, (record, pred, ep) in zip(axes, details[:n]):
        img, mask = ep.supports[0]
        row[0].imshow(np.transpose(img, (1, 2, 0)))
        row[0].contour(mask, levels=[0.5], colors="w", linewidths=0.8)
        row[1].imshow(np.transpose(ep.query_image, (1, 2, 0)))
        row[1].contour(ep.query_mask, levels=[0.5], colors="w", linewidths=0.8)
        row[2].imshow(pred, cmap="gray", vmin=0, vmax=1)
        row[2].set_title(f"IoU {record.iou:.2f}", fontsize=8)
        for ax in row:
            ax.set_xticks([])
            ax.set_yticks([])
            ax.grid(False)
    axes[0][0].set_title("support", fontsize=8)
    axes[0][1].set_title("query", fontsize=8)
    return _save(fig, path)


def plot_sweep(rows: Sequence[dict], param: str, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if param == "lambda_mcl":
        x = [float(r["lambda_mcl"]) for r in rows]
        ax.plot(x, [float(r["mean_iou"]) for r in rows], "o-")
        ax.set_xscale("log")
        ax.set_xlabel("lambda_mcl")
    else:
        for bs in sorted({int(r["batch_size"]) for r in rows}):
            sub = [r for r in rows if int(r["batch_size"]) == bs]
            ax.plot([float(r["lr"]) for r in sub], [float(r["mean_iou"]) for r in sub], "o-", label=f"batch {bs}")
        ax.set_xscale("log")
        ax.set_xlabel("initial learning rate")
        ax.legend(frameon=False)
    ax.set_ylabel("mean-IoU")
    return _save(fig, path)
