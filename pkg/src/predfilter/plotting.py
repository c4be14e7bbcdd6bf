"""Matplotlib figures written next to the CSV reports.

Uses the object-oriented ``Figure`` API so no pyplot state or GUI backend is
involved.
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from matplotlib.figure import Figure

_RC = {"dpi": 120}
_METADATA = {"Software": None}  # keeps PNG bytes free of the matplotlib version


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata=_METADATA, bbox_inches="tight")
    return path


def plot_confusion(counts: np.ndarray, path, title: str = "", class_names: Optional[Sequence[str]] = None) -> Path:
    """Row-normalised confusion heatmap (rows: ground truth, columns: prediction)."""
    counts = np.asarray(counts, dtype=np.float64)
    k = counts.shape[0]
    rows = counts.sum(axis=1, keepdims=True)
    norm = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    names = list(class_names) if class_names else [str(c) for c in range(k)]

    fig = Figure(figsize=(1.0 + 0.45 * k, 0.8 + 0.45 * k), **_RC)
    ax = fig.add_subplot()
    im = ax.imshow(norm, vmin=0.0, vmax=1.0, cmap="Blues")
    ax.set_xticks(range(k), names, rotation=90 if k > 8 else 0)
    ax.set_yticks(range(k), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("ground truth")
    if k <= 12:
        for r in range(k):
            for c in range(k):
                if norm[r, c] >= 0.005:
                    ax.text(c, r, f"{norm[r, c]:.2f}", ha="center", va="center", fontsize=7,
                            color="white" if norm[r, c] > 0.5 else "black")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    return _save(fig, path)


def plot_per_class_iou(reports: Mapping[str, object], path, class_names: Optional[Sequence[str]] = None) -> Path:
    """Grouped bars of per-class IoU, one bar series per prediction mode."""
    modes = list(reports)
    k = next(iter(reports.values())).num_classes
    names = list(class_names) if class_names else [str(c) for c in range(k)]
    width = 0.8 / max(1, len(modes))
    x = np.arange(k)

    fig = Figure(figsize=(max(4.0, 0.6 * k + 1.5), 3.2), **_RC)
    ax = fig.add_subplot()
    for i, mode in enumerate(modes):
        rep = reports[mode]
        vals = [100.0 * v if v is not None else np.nan for v in rep.iou]
        label = f"{mode} ({100.0 * rep.miou:.1f})" if rep.miou is not None else mode
        ax.bar(x + (i - (len(modes) - 1) / 2) * width, vals, width, label=label)
    ax.set_xticks(x, names)
    ax.set_xlabel("class")
    ax.set_ylabel("IoU (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=7, frameon=False, loc="lower center", bbox_to_anchor=(0.5, 1.0),
              ncol=len(modes))
    return _save(fig, path)


def plot_sweep(rows: Sequence[Mapping], path, baseline: Optional[float] = None,
               oracle: Optional[float] = None) -> Path:
    """mIoU against filtering threshold, with optional reference lines."""
    taus = [r["tau"] for r in rows]
    mious = [100.0 * r["miou"] if r["miou"] is not None else np.nan for r in rows]

    fig = Figure(figsize=(4.5, 3.0), **_RC)
    ax = fig.add_subplot()
    ax.plot(taus, mious, marker="o", ms=3, label="prediction filtering")
    if baseline is not None:
        ax.axhline(100.0 * baseline, color="0.4", ls="--", lw=1, label="baseline")
    if oracle is not None:
        ax.axhline(100.0 * oracle, color="C2", ls=":", lw=1, label="oracle")
    ax.set_xlabel("threshold")
    ax.set_ylabel("mIoU (%)")
    ax.legend(fontsize=7, frameon=False)
    return _save(fig, path)
