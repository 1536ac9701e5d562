"""Report figures: side-by-side image panels and loss curves, rendered to PNG files."""

from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _show(ax, img, title):
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if img.ndim == 3 and img.shape[2] == 1:
        ax.imshow(img[:, :, 0], cmap="gray", vmin=0, vmax=1, interpolation="nearest")
    else:
        ax.imshow(img, interpolation="nearest")
    ax.set_title(title, fontsize=8)
    ax.set_xticks([])
    ax.set_yticks([])


def save_panel(path, images: list, titles: list, suptitle: str | None = None) -> None:
    """One row of images with per-image titles."""
    fig, axes = plt.subplots(1, len(images), figsize=(2.2 * len(images), 2.5), squeeze=False)
    for ax, img, title in zip(axes[0], images, titles):
        _show(ax, img, title)
    if suptitle:
        fig.suptitle(suptitle, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def save_loss_curves(path, rows, title: str = "loss") -> None:
    """``rows`` are ``(iteration, term, value)``; every term gets its own log-scale line."""
    series = defaultdict(list)
    for it, term, value in rows:
        series[term].append((it, value))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for term in sorted(series):
        pts = np.array(series[term], dtype=np.float64)
        pts = pts[pts[:, 1] > 0]
        if len(pts):
            ax.plot(pts[:, 0], pts[:, 1], lw=1, label=term)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("value")
    ax.set_title(title, fontsize=9)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def save_crf_curve(path, x: np.ndarray, y: np.ndarray) -> None:
    fig, ax = plt.subplots(figsize=(3.5, 3.5))
    ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
    for c in range(y.shape[1]):
        ax.plot(x, y[:, c], lw=1.2)
    ax.set_xlabel("input")
    ax.set_ylabel("response")
    ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
