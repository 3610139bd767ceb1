"""Figures and mask serialization for reports.

Uses ``matplotlib.figure.Figure`` directly so nothing touches pyplot's global
state or needs a display.  Mask labels are drawn with the viridis palette:
purple for the cheapest (lowest-frequency) branch through yellow for the
heaviest.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from matplotlib import colormaps
from matplotlib.figure import Figure
from matplotlib.patches import Patch
from PIL import Image

from .dct import FrequencyMask


def mask_palette(num_branches: int) -> np.ndarray:
    """(K, 3) uint8 colors, label 0 purple, label K-1 yellow."""
    cmap = colormaps["viridis"]
    pos = np.linspace(0.0, 1.0, num_branches) if num_branches > 1 else np.zeros(1)
    return np.round(np.array([cmap(p)[:3] for p in pos]) * 255).astype(np.uint8)


def mask_to_rgb(mask: FrequencyMask) -> np.ndarray:
    return mask_palette(mask.num_branches)[mask.labels]


def save_mask_png(mask: FrequencyMask, path) -> Path:
    """Write an indexed-color (palette) PNG whose pixel values are the labels."""
    if mask.labels.ndim != 2:
        raise ValueError("save_mask_png expects a single (H, W) mask")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(mask.labels.astype(np.uint8), mode="P")
    img.putpalette(mask_palette(mask.num_branches).ravel().tolist())
    img.save(path)
    return path


def load_mask_png(path, num_branches: int) -> FrequencyMask:
    with Image.open(path) as img:
        return FrequencyMask(np.asarray(img).astype(np.int64), num_branches)


def save_mask_grid(mask: FrequencyMask, path) -> Path:
    """Plain-text grid: one row per line, labels separated by spaces."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = (" ".join(str(int(v)) for v in row) for row in mask.labels)
    path.write_text("\n".join(rows) + "\n")
    return path


def load_mask_grid(path, num_branches: int) -> FrequencyMask:
    rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
    return FrequencyMask(np.array(rows, dtype=np.int64), num_branches)


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    return path


def plot_masks(masks: Sequence[FrequencyMask], path, titles: Optional[Sequence[str]] = None) -> Path:
    """Side-by-side panel of per-block masks with a shared legend."""
    n = len(masks)
    fig = Figure(figsize=(3.2 * n, 3.4))
    axes = fig.subplots(1, n, squeeze=False)[0]
    for i, (ax, m) in enumerate(zip(axes, masks)):
        ax.imshow(mask_to_rgb(m), interpolation="nearest")
        ax.set_title(titles[i] if titles else f"block {i}")
        ax.set_xticks([])
        ax.set_yticks([])
    if masks:
        k = masks[0].num_branches
        colors = mask_palette(k) / 255.0
        handles = [Patch(color=colors[j], label=f"branch {j}") for j in range(k)]
        fig.legend(handles=handles, loc="lower center", ncol=k, frameon=False)
    return _save(fig, path)


def plot_confusion(matrix: np.ndarray, path, title: str = "", labels: Optional[Sequence[str]] = None) -> Path:
    """Heatmap of a row-normalized confusion matrix (rows: DCT label, columns: learned label)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {matrix.shape}")
    k = matrix.shape[0]
    labels = list(labels) if labels is not None else [str(i) for i in range(k)]
    fig = Figure(figsize=(1.2 * k + 2.0, 1.2 * k + 1.4))
    ax = fig.subplots()
    im = ax.imshow(matrix, cmap="Blues", vmin=0.0, vmax=1.0)
    for i in range(k):
        for j in range(k):
            ax.text(j, i, f"{matrix[i, j]:.2f}", ha="center", va="center",
                    color="white" if matrix[i, j] > 0.6 else "black")
    ax.set_xticks(range(k), labels)
    ax.set_yticks(range(k), labels)
    ax.set_xlabel("learned mask label")
    ax.set_ylabel("DCT mask label")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)


def plot_bars(names: Sequence[str], values: Sequence[float], path, ylabel: str,
              title: str = "", reference: Optional[float] = None,
              secondary: Optional[Sequence[float]] = None, secondary_label: str = "") -> Path:
    """Bar chart with optional horizontal reference line and a second series on a twin axis."""
    fig = Figure(figsize=(max(4.0, 1.3 * len(names) + 1.5), 4.0))
    ax = fig.subplots()
    x = np.arange(len(names))
    vals = np.asarray(values, dtype=np.float64)
    ax.bar(x, vals, color="#4c72b0", width=0.6)
    finite = vals[np.isfinite(vals)]
    if finite.size:
        lo, hi = finite.min(), finite.max()
        if reference is not None and np.isfinite(reference):
            lo, hi = min(lo, reference), max(hi, reference)
        pad = max(0.05 * (hi - lo), 0.05)
        ax.set_ylim(lo - 4 * pad, hi + 2 * pad)
    if reference is not None:
        ax.axhline(reference, color="#c44e52", linestyle="--", label="bicubic")
        ax.legend(loc="upper left", frameon=False)
    ax.set_xticks(x, list(names), rotation=20, ha="right")
    ax.set_ylabel(ylabel)
    if secondary is not None:
        ax2 = ax.twinx()
        ax2.plot(x, secondary, "o-", color="#dd8452")
        ax2.set_ylabel(secondary_label)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_series(xs: Sequence[float], series: Mapping[str, Sequence[float]], path,
                xlabel: str, ylabel: str, title: str = "") -> Path:
    fig = Figure(figsize=(5.5, 4.0))
    ax = fig.subplots()
    for name, ys in series.items():
        ax.plot(xs, ys, "o-", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend(frameon=False)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_training_log(log: Sequence[Mapping], path) -> Path:
    """Two panels: reconstruction loss and measured FLOPs ratio against iteration."""
    its = [e["iter"] for e in log]
    fig = Figure(figsize=(9.0, 3.6))
    ax1, ax2 = fig.subplots(1, 2)
    ax1.plot(its, [e["L_sr"] for e in log])
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("L1 loss")
    ax1.set_yscale("log")
    ax2.plot(its, [e["flops_ratio"] for e in log])
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("FLOPs ratio")
    return _save(fig, path)


def plot_eval(report, path) -> Path:
    """Per-image PSNR bars with the FLOPs ratio on a twin axis when available."""
    rows = report.ok_rows
    ratios = [r.flops_ratio for r in rows]
    has_ratio = any(np.isfinite(ratios))
    return plot_bars([r.name for r in rows], [r.psnr for r in rows], path, "PSNR (dB, Y)",
                     title=f"x{report.scale} evaluation",
                     secondary=ratios if has_ratio else None,
                     secondary_label="FLOPs ratio")
