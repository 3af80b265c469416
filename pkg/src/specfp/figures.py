"""Report figures rendered straight to files (headless Agg backend)."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import CrossConfigReport, EvalReport, SweepRow
from .traces import TraceStats
from .training import TrainHistory


def save_packet_stats_figure(stats: Sequence[TraceStats], path) -> None:
    """Per-device packet counts and mean +- std packet sizes."""
    names = [f"{s.device_id}:{s.device_name}" for s in stats]
    x = np.arange(len(stats))
    fig, (ax_count, ax_size) = plt.subplots(1, 2, figsize=(11, 4))
    ax_count.bar(x, [s.count for s in stats], color="tab:blue")
    ax_count.set_xticks(x, names, rotation=45, ha="right", fontsize=8)
    ax_count.set_ylabel("packets")
    ax_count.set_title("packet count")
    ax_size.errorbar(x, [s.mean_bytes for s in stats],
                     yerr=[s.std_bytes for s in stats],
                     fmt="o", capsize=3, color="tab:orange")
    ax_size.set_xticks(x, names, rotation=45, ha="right", fontsize=8)
    ax_size.set_ylabel("bytes")
    ax_size.set_title("packet size (mean +- std)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_history_figure(history: TrainHistory, path) -> None:
    epochs = [r.epoch for r in history.rows]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(11, 4))
    ax_loss.plot(epochs, [r.train_loss for r in history.rows], label="train")
    ax_loss.plot(epochs, [r.val_loss for r in history.rows], label="val")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_acc.plot(epochs, [100.0 * r.train_acc for r in history.rows], label="train")
    ax_acc.plot(epochs, [100.0 * r.val_acc for r in history.rows], label="val")
    ax_acc.axvline(history.best_epoch, color="gray", linestyle=":", label="best")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy (%)")
    ax_acc.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_confusion_figure(report: EvalReport, path) -> None:
    matrix = report.confusion
    size = matrix.shape[0]
    fig, ax = plt.subplots(figsize=(5.5, 5))
    im = ax.imshow(matrix, cmap="Blues")
    fig.colorbar(im, ax=ax, shrink=0.8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_xticks(range(size))
    ax.set_yticks(range(size))
    if size <= 20:
        threshold = matrix.max() / 2 if matrix.max() else 0
        for r in range(size):
            for c in range(size):
                ax.text(c, r, int(matrix[r, c]), ha="center", va="center",
                        fontsize=8,
                        color="white" if matrix[r, c] > threshold else "black")
    ax.set_title(f"accuracy {report.accuracy_pct:.2f}%")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sweep_figure(rows: Sequence[SweepRow], path) -> None:
    labels = [
        f"{r.config.method} R{r.config.resolution} "
        f"L{r.config.seg_len} p{r.config.overlap:g}"
        for r in rows
    ]
    y = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(8, 0.3 * len(rows) + 1.5))
    ax.barh(y, [r.test_pct for r in rows],
            xerr=[r.ci_width_pct / 2 for r in rows],
            color="tab:green", capsize=2)
    ax.set_yticks(y, labels, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel("test accuracy (%)")
    ax.set_xlim(0, 100)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_crosseval_figure(report: CrossConfigReport, path) -> None:
    """Accuracy heatmap over (seg_len, overlap) with the in-distribution
    cell outlined."""
    seg_lens = list(dict.fromkeys(c.seg_len for c in report.cells))
    overlaps = list(dict.fromkeys(c.overlap for c in report.cells))
    grid = np.full((len(seg_lens), len(overlaps)), np.nan)
    matched = None
    for cell in report.cells:
        r = seg_lens.index(cell.seg_len)
        c = overlaps.index(cell.overlap)
        grid[r, c] = cell.accuracy_pct
        if cell.matched:
            matched = (r, c)
    fig, ax = plt.subplots(figsize=(6, 4))
    im = ax.imshow(grid, cmap="viridis", vmin=0, vmax=100)
    fig.colorbar(im, ax=ax, shrink=0.8, label="accuracy (%)")
    ax.set_xticks(range(len(overlaps)), [f"{p:g}" for p in overlaps])
    ax.set_yticks(range(len(seg_lens)), [str(s) for s in seg_lens])
    ax.set_xlabel("overlap")
    ax.set_ylabel("segment length")
    for r in range(len(seg_lens)):
        for c in range(len(overlaps)):
            ax.text(c, r, f"{grid[r, c]:.1f}", ha="center", va="center",
                    fontsize=8, color="white")
    if matched is not None:
        r, c = matched
        ax.add_patch(plt.Rectangle((c - 0.5, r - 0.5), 1, 1, fill=False,
                                   edgecolor="red", linewidth=2))
    ax.set_title(f"max gap {report.max_gap:.2f} points")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
