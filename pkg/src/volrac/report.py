"""Figure rendering for the CLI report paths.

Each report-producing command can write PNG figures next to its delimited
text output: training curves, slice triptychs for evaluation, context-growth
curves for the reachability analyzer, and benchmark bar charts. All figures
go through the Agg backend so the CLI stays headless.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .volume import Volume


def save_training_curves(log_rows, path) -> Path:
    """Loss and test-PSNR curves from (step, train_loss, test_psnr, test_ssim) rows."""
    path = Path(path)
    rows = list(log_rows)
    steps = [r[0] for r in rows]
    losses = [r[1] for r in rows]
    psnrs = [r[2] for r in rows]

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(steps, losses, lw=1.2)
    ax1.set_yscale("log")
    ax1.set_xlabel("step")
    ax1.set_ylabel("train loss")
    ax1.grid(alpha=0.3)
    if np.all(np.isfinite(psnrs)):
        ax2.plot(steps, psnrs, lw=1.2, color="tab:orange")
    ax2.set_xlabel("step")
    ax2.set_ylabel("test PSNR [dB]")
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def save_eval_triptych(ref: Volume, test: Volume, path) -> Path:
    """Center axial slices of reference, test, and |difference|."""
    path = Path(path)
    z = ref.side // 2
    diff = np.abs(ref.data[z] - test.data[z])

    fig, axes = plt.subplots(1, 3, figsize=(10, 3.6))
    for ax, img, title, cmap in (
        (axes[0], ref.data[z], "reference", "gray"),
        (axes[1], test.data[z], "test", "gray"),
        (axes[2], diff, "|difference|", "magma"),
    ):
        im = ax.imshow(img, cmap=cmap)
        ax.set_title(title)
        ax.axis("off")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def save_context_growth(sizes_per_layer: np.ndarray, schedule, n_cells: int, path) -> Path:
    """Min/mean/max reachable-set size after each layer of the schedule."""
    path = Path(path)
    layers = np.arange(1, len(schedule) + 1)
    mins = sizes_per_layer.min(axis=1)
    means = sizes_per_layer.mean(axis=1)
    maxs = sizes_per_layer.max(axis=1)

    fig, ax = plt.subplots(figsize=(6, 3.8))
    ax.plot(layers, means, "o-", label="mean")
    ax.fill_between(layers, mins, maxs, alpha=0.25, label="min..max")
    ax.axhline(n_cells, color="k", ls="--", lw=0.8, label="global")
    ax.set_xticks(layers)
    ax.set_xticklabels([f"{i}:{k}" for i, k in zip(layers, schedule)])
    ax.set_xlabel("layer (scheme)")
    ax.set_ylabel("reachable cells")
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def save_bench_chart(results, path) -> Path:
    """Horizontal bars of median wall time per benchmarked scenario."""
    path = Path(path)
    labels = [r.label for r in results]
    medians = [r.median_s * 1e6 for r in results]

    fig, ax = plt.subplots(figsize=(6.5, 0.7 + 0.5 * len(labels)))
    ax.barh(labels, medians, color="tab:blue")
    ax.set_xlabel("median wall time [us]")
    ax.grid(axis="x", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def save_volume_montage(v: Volume, path, title: str = "") -> Path:
    """3x3 grid of evenly spaced axial slices of one volume."""
    path = Path(path)
    zs = np.linspace(0, v.side - 1, 9).astype(int)
    fig, axes = plt.subplots(3, 3, figsize=(7, 7))
    for ax, z in zip(axes.ravel(), zs):
        ax.imshow(v.data[z], cmap="gray", vmin=0.0, vmax=1.0)
        ax.set_title(f"z={z}", fontsize=7)
        ax.axis("off")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path
