"""Matplotlib renderings: attention rows, disparity maps, masks, loss curves.

Every function writes a PNG to a path and returns the path; rendering is
deterministic for fixed inputs (fixed figure geometry and colormaps, no
timestamps), so repeated renders hash identically.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "attention_rows_figure",
    "disparity_figure",
    "mask_overlay_figure",
    "loss_curve_figure",
    "metrics_table_figure",
]

_DPI = 110


def _save(fig, path) -> str:
    path = str(path)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=_DPI, metadata={"Software": "pamstereo"})
    plt.close(fig)
    return path


def attention_rows_figure(attn: np.ndarray, rows: Sequence[int], path,
                          title: str = "attention rows") -> str:
    """Render the WxW attention block of selected image rows.

    A zero-disparity row shows the identity diagonal; a uniform shift shows
    a parallel off-diagonal line.
    """
    attn = np.asarray(attn)
    if attn.ndim != 3:
        raise ValueError("expected (H, W, W) attention for a single sample")
    H = attn.shape[0]
    for r in rows:
        if not 0 <= r < H:
            raise IndexError(f"row {r} outside 0..{H - 1}")
    n = len(rows)
    fig, axes = plt.subplots(1, n, figsize=(3.0 * n, 3.2), squeeze=False)
    for ax, r in zip(axes[0], rows):
        ax.imshow(attn[r], cmap="viridis", vmin=0.0, interpolation="nearest")
        ax.set_title(f"row {r}")
        ax.set_xlabel("source column")
        ax.set_ylabel("target column")
    fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def disparity_figure(disp: np.ndarray, path, valid: Optional[np.ndarray] = None,
                     title: str = "disparity") -> str:
    disp = np.asarray(disp)
    fig, ax = plt.subplots(figsize=(5.2, 3.2))
    im = ax.imshow(disp, cmap="turbo")
    if valid is not None:
        ax.contour(valid, levels=[0.5], colors="white", linewidths=0.8)
    fig.colorbar(im, ax=ax, label="px")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def mask_overlay_figure(img: np.ndarray, mask: np.ndarray, path,
                        title: str = "valid mask") -> str:
    img = np.asarray(img)
    if img.ndim == 3:
        img = img.mean(axis=0)
    fig, ax = plt.subplots(figsize=(5.2, 3.2))
    ax.imshow(img, cmap="gray", vmin=0, vmax=1)
    overlay = np.zeros((*mask.shape, 4))
    overlay[mask < 0.5] = (1.0, 0.25, 0.1, 0.55)  # occluded in red
    ax.imshow(overlay, interpolation="nearest")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def loss_curve_figure(csv_text: str, path, title: str = "training loss") -> str:
    lines = [l for l in csv_text.strip().splitlines() if l]
    header = lines[0].split(",")
    data = np.array([[float(v) for v in l.split(",")] for l in lines[1:]])
    fig, ax = plt.subplots(figsize=(5.6, 3.4))
    steps = data[:, 0]
    for i, name in enumerate(header[1:], start=1):
        if name in ("lr",):
            continue
        ax.plot(steps, data[:, i], label=name, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_yscale("log")
    ax.legend(fontsize=7, ncol=2)
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def metrics_table_figure(rows: Sequence[str], path, title: str = "metrics") -> str:
    fig, ax = plt.subplots(figsize=(6.0, 0.6 + 0.32 * len(rows)))
    ax.axis("off")
    ax.set_title(title, loc="left")
    for i, row in enumerate(rows):
        ax.text(0.01, 1.0 - (i + 1) * (1.0 / (len(rows) + 1)), row,
                family="monospace", fontsize=9, transform=ax.transAxes)
    return _save(fig, path)
