"""Report figures written next to the CLI's delimited output."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes reproducible across runs
_PNG_META = {"Software": None}

plt.rcParams.update({
    "figure.dpi": 100,
    "font.size": 8,
    "axes.titlesize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
})


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_targets(image: np.ndarray, center_heat: np.ndarray, corner_heat: np.ndarray, path,
                 boxes: Sequence = (), corners: Sequence = ()) -> Path:
    """Scene, center heatmap and the max over corner heatmaps, with decoded geometry overlaid."""
    fig, axes = plt.subplots(1, 3, figsize=(9, 2.4))
    axes[0].imshow(image, cmap="gray", vmin=0, vmax=1)
    axes[0].set_title("scene")
    for box in boxes:
        x1, y1, x2, y2 = box
        axes[0].add_patch(plt.Rectangle((x1, y1), x2 - x1, y2 - y1, fill=False, color="tab:orange", lw=1))
    for quad in corners:
        q = np.asarray(quad)
        axes[0].plot(q[[0, 1, 3, 2, 0], 0], q[[0, 1, 3, 2, 0], 1], color="tab:cyan", lw=0.8)
    axes[1].imshow(np.asarray(center_heat).squeeze(), cmap="magma", vmin=0, vmax=1)
    axes[1].set_title("center heatmap")
    axes[2].imshow(np.asarray(corner_heat).max(axis=0), cmap="magma", vmin=0, vmax=1)
    axes[2].set_title("corner heatmaps (max)")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    return _save(fig, path)


def plot_rectification(before: np.ndarray, after: np.ndarray, path) -> Path:
    """Channel-mean of a plate crop before and after rectification."""
    fig, axes = plt.subplots(2, 1, figsize=(4, 2.8))
    for ax, data, title in zip(axes, (before, after), ("RoIAlign crop", "rectified")):
        ax.imshow(np.asarray(data).mean(axis=0) if np.ndim(data) == 3 else data, cmap="gray")
        ax.set_title(title)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    return _save(fig, path)


def plot_iou_histogram(ious: Sequence[float], threshold: float, path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 2.6))
    ax.hist(np.asarray(ious, dtype=float), bins=np.linspace(0, 1, 21), color="tab:blue", edgecolor="white")
    ax.axvline(threshold, color="tab:red", ls="--", lw=1, label=f"IoU threshold {threshold:g}")
    ax.set_xlabel("IoU with ground truth")
    ax.set_ylabel("predictions")
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def plot_ctc_posteriors(probs: np.ndarray, tokens: Sequence[str], path, title: str = "") -> Path:
    """T x K frame posteriors of one plate as a heat image; blank is the last row."""
    p = np.asarray(probs)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.imshow(p.T, aspect="auto", cmap="viridis", vmin=0, vmax=1, interpolation="nearest")
    labels = list(tokens) + ["-"]
    ax.set_yticks(range(len(labels)))
    ax.set_yticklabels(labels, fontsize=5)
    ax.set_xlabel("time step")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)
