"""Matplotlib renderers for the report paths; every figure lands next to the
CSV it visualizes. Headless (Agg) on purpose.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .arch import ApkMask, N_TOOTH_CLASSES  # noqa: E402
from .data import LabeledScene  # noqa: E402
from .metrics import IoUReport  # noqa: E402


def save_training_curves(train_log: str, val_log: str, out_png: str) -> None:
    steps, l_th, l_fb, l_total = [], [], [], []
    with open(train_log) as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            l_th.append(float(row["L_th"]))
            l_fb.append(float(row["L_fb"]))
            l_total.append(float(row["L_total"]))
    val_steps, val_miou = [], []
    with open(val_log) as fh:
        for row in csv.DictReader(fh):
            val_steps.append(int(row["step"]))
            val_miou.append(float(row["val_miou"]))

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, l_total, label="L_total", lw=1.2)
    ax.plot(steps, l_th, label="L_th", lw=0.8, alpha=0.7)
    ax.plot(steps, l_fb, label="L_fb", lw=0.8, alpha=0.7)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right")
    if val_steps:
        ax2 = ax.twinx()
        ax2.plot(val_steps, val_miou, "o-", color="tab:red", ms=3, label="val mIoU")
        ax2.set_ylabel("val mIoU", color="tab:red")
        ax2.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def save_iou_bars(report: IoUReport, out_png: str) -> None:
    labels = [f"T{i + 1}" for i in range(N_TOOTH_CLASSES)]
    values = np.nan_to_num(report.per_class, nan=0.0)
    absent = np.isnan(report.per_class)
    fig, ax = plt.subplots(figsize=(8, 3.5))
    colors = ["lightgray" if a else "tab:blue" for a in absent]
    ax.bar(labels, values, color=colors)
    for i, a in enumerate(absent):
        if a:
            ax.text(i, 0.02, "NaN", ha="center", fontsize=7, rotation=90)
    ax.axhline(report.miou, color="tab:red", ls="--", lw=1, label=f"mIoU={report.miou:.3f}")
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def save_ablation_bars(results, out_png: str) -> None:
    names = [r.variant for r in results]
    vals = [r.test_miou for r in results]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    bars = ax.bar(names, vals, color="tab:blue")
    for bar, v in zip(bars, vals):
        ax.text(bar.get_x() + bar.get_width() / 2, v + 0.01, f"{v:.3f}", ha="center", fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_xlabel("variant")
    ax.set_ylabel("test mIoU")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def save_mask_grid(mask: ApkMask, out_png: str) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.imshow(mask.allowed, cmap="Greens", vmin=0, vmax=1)
    ticks = np.arange(N_TOOTH_CLASSES)
    names = [f"T{i + 1}" for i in ticks]
    ax.set_xticks(ticks, names, fontsize=6, rotation=90)
    ax.set_yticks(ticks, names, fontsize=6)
    ax.set_title("allowed token interactions", fontsize=9)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def save_scene_montage(scenes: list[LabeledScene], out_png: str, cols: int = 4) -> None:
    """Top row: images; bottom row: label maps."""
    cols = max(1, min(cols, len(scenes)))
    fig, axes = plt.subplots(2, cols, figsize=(2.2 * cols, 4.6), squeeze=False)
    for j in range(cols):
        axes[0][j].imshow(scenes[j].image[:, :, 0], cmap="gray", vmin=0, vmax=1)
        axes[1][j].imshow(scenes[j].labels, cmap="tab20", vmin=0, vmax=16)
        for row in (0, 1):
            axes[row][j].set_xticks([])
            axes[row][j].set_yticks([])
    axes[0][0].set_ylabel("image", fontsize=8)
    axes[1][0].set_ylabel("labels", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
