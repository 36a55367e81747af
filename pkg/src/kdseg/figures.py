"""Matplotlib figure rendering for training runs and ablation reports.

All functions write PNG files next to the delimited outputs and never open
interactive windows (the Agg backend is forced on import).
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

REGION_LABELS = {"wt": "WT", "tc": "TC", "et": "ET"}


def plot_training_curves(history: list[dict], out_path) -> Path:
    """Loss curves of one run: train/val totals plus the lr schedule."""
    out_path = Path(out_path)
    epochs = [row["epoch"] for row in history]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(epochs, [r["train_total"] for r in history], label="train total")
    ax.plot(epochs, [r["val_total"] for r in history], label="val total")
    for key, label in (
        ("train_kd", "train kd"),
        ("train_kl", "train kl"),
        ("train_gt", "train gt"),
    ):
        series = [r[key] for r in history]
        if any(v != 0.0 for v in series):
            ax.plot(epochs, series, alpha=0.5, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    ax2 = ax.twinx()
    ax2.plot(epochs, [r["lr"] for r in history], color="gray", ls=":", lw=1)
    ax2.set_ylabel("lr", color="gray")
    ax2.set_yscale("log")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_ablation(result, out_path) -> Path:
    """Grouped bars of mean Dice per region for every ablation entry, with
    fold-std error bars. Failed rows are skipped with a note."""
    out_path = Path(out_path)
    ok = [e for e in result.entries if e.error is None]
    failed = len(result.entries) - len(ok)
    labels = [
        f"s{e.row.skip_connections} {e.row.model}\n{e.row.loss}" for e in ok
    ]
    x = np.arange(len(ok))
    width = 0.27
    fig, ax = plt.subplots(figsize=(max(6.0, 1.1 * len(ok) + 2), 4.5))
    for i, region in enumerate(("wt", "tc", "et")):
        means = [e.mean(region) for e in ok]
        stds = [e.std(region) for e in ok]
        ax.bar(
            x + (i - 1) * width,
            means,
            width,
            yerr=stds,
            capsize=2,
            label=REGION_LABELS[region],
        )
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("Dice (%)")
    ax.set_ylim(0, 105)
    title = "Ablation: mean Dice over folds"
    if failed:
        title += f" ({failed} row(s) failed)"
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_region_overlay(image2d, target2d, pred2d, out_path, title="") -> Path:
    """Side-by-side slice view: image, reference regions, prediction."""
    out_path = Path(out_path)
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.6))
    axes[0].imshow(np.asarray(image2d), cmap="gray")
    axes[0].set_title("image")
    for ax, vol, name in (
        (axes[1], target2d, "reference"),
        (axes[2], pred2d, "prediction"),
    ):
        ax.imshow(np.asarray(vol), vmin=0, vmax=3, cmap="viridis")
        ax.set_title(name)
    for ax in axes:
        ax.axis("off")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
