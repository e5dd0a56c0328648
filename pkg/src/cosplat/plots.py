"""Figure rendering for the report paths: every CSV a command writes gets a
matplotlib figure next to it (training curves, sweep lines, variance-map
heatmaps). Uses the Agg backend; no display needed.
"""

from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def save_training_curves(path, records) -> None:
    """PSNR and CA curves over iterations from trainer log records."""
    iters = [r.iteration for r in records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(iters, [r.train_psnr for r in records], marker="o", label="train")
    if not all(np.isnan(r.test_psnr) for r in records):
        ax1.plot(iters, [r.test_psnr for r in records], marker="s", label="test")
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("PSNR (dB)")
    ax1.legend()
    for key, label, mk in (("train_ca", "train", "o"), ("test_ca", "test", "s")):
        xs = [r.iteration for r in records if getattr(r, key) is not None]
        ys = [getattr(r, key) for r in records if getattr(r, key) is not None]
        if xs:
            ax2.plot(xs, ys, marker=mk, label=label)
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("CA score")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_heatmap(path, data: np.ndarray, title: str = "", label: str = "") -> None:
    """Single-channel heatmap (variance maps, CV maps)."""
    fig, ax = plt.subplots(figsize=(4, 3.5))
    im = ax.imshow(np.asarray(data), cmap="magma")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label=label)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_sweep_lines(path, xs: Sequence, series: dict, xlabel: str) -> None:
    """One line per metric across the sweep grid; numeric or categorical x."""
    positions = np.arange(len(xs))
    fig, axes = plt.subplots(1, len(series), figsize=(3.6 * len(series), 3.2))
    if len(series) == 1:
        axes = [axes]
    for ax, (name, ys) in zip(axes, series.items()):
        pts = [(p, y) for p, y in zip(positions, ys) if y is not None and np.isfinite(y)]
        if pts:
            ax.plot([p for p, _ in pts], [y for _, y in pts], marker="o")
        ax.set_xticks(positions)
        ax.set_xticklabels([str(x) for x in xs])
        ax.set_xlabel(xlabel)
        ax.set_ylabel(name)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_view_bars(path, view_ids: Sequence[int], values: Sequence[Optional[float]],
                   splits: Sequence[str], ylabel: str) -> None:
    """Per-view bar chart with train/test views colored differently."""
    fig, ax = plt.subplots(figsize=(6, 3.2))
    colors = ["tab:blue" if s == "train" else "tab:orange" for s in splits]
    heights = [0.0 if v is None else v for v in values]
    ax.bar(range(len(view_ids)), heights, color=colors)
    ax.set_xticks(range(len(view_ids)))
    ax.set_xticklabels([str(v) for v in view_ids])
    ax.set_xlabel("view")
    ax.set_ylabel(ylabel)
    handles = [plt.Rectangle((0, 0), 1, 1, color=c) for c in ("tab:blue", "tab:orange")]
    ax.legend(handles, ["train", "test"])
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
