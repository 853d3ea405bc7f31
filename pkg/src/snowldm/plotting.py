"""Figures for training curves and range images, rendered straight to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .range_codec import RangeImage  # noqa: E402


def smooth(values: np.ndarray, window: int = 50) -> np.ndarray:
    """Trailing moving average; the first entries average what is available."""
    values = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(values, 0, 0.0))
    idx = np.arange(1, values.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def plot_losses(logs: dict[str, tuple[list[str], np.ndarray]], path: str | Path, window: int = 50) -> None:
    """One panel per log file, every loss column smoothed on a log scale."""
    fig, axes = plt.subplots(1, len(logs), figsize=(5 * len(logs), 3.5), squeeze=False)
    for ax, (name, (header, data)) in zip(axes[0], logs.items()):
        for j, col in enumerate(header[1:], 1):
            ax.plot(data[:, 0], np.maximum(smooth(data[:, j], window), 1e-12), label=col)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_title(name)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_range_images(images: list[tuple[str, RangeImage]], path: str | Path) -> None:
    """Stacked depth panels; no-return pixels are drawn black."""
    fig, axes = plt.subplots(len(images), 1, figsize=(8, 1.6 * len(images) + 0.4), squeeze=False)
    cmap = matplotlib.colormaps["viridis"].with_extremes(bad="black")
    for ax, (title, img) in zip(axes[:, 0], images):
        shown = np.ma.masked_where(~img.valid, img.depth)
        ax.imshow(shown, cmap=cmap, vmin=-1, vmax=1, origin="lower", aspect="auto", interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.set_yticks([])
        ax.set_xticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
