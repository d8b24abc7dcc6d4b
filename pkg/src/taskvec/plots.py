"""Matplotlib renderings of saliency reports and separation sweeps."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .saliency import LayerMaskSet, SaliencyMatrix, SharedMask


def _layer_ticks(ax, names: Sequence[str]) -> None:
    ax.set_xticks(range(len(names)))
    labels = [n if len(n) <= 18 else n[:15] + "..." for n in names]
    ax.set_xticklabels(labels, rotation=90, fontsize=6)


def save_saliency_figure(
    matrix: SaliencyMatrix,
    path: str | Path,
    maskset: LayerMaskSet | None = None,
    shared: SharedMask | None = None,
) -> None:
    """Heatmap of layer scores, optionally with the resulting masks below."""
    n_panels = 1 + (maskset is not None)
    fig, axes = plt.subplots(
        n_panels, 1, figsize=(max(6.0, 0.25 * len(matrix.layer_names)), 3.0 * n_panels),
        squeeze=False,
    )
    ax = axes[0][0]
    im = ax.imshow(matrix.scores, aspect="auto", cmap="viridis")
    ax.set_yticks(range(len(matrix.task_ids)))
    ax.set_yticklabels(matrix.task_ids, fontsize=7)
    ax.set_title("layer saliency")
    _layer_ticks(ax, matrix.layer_names)
    fig.colorbar(im, ax=ax, fraction=0.03)

    if maskset is not None:
        ax = axes[1][0]
        rows = maskset.masks
        labels = list(maskset.task_ids)
        if shared is not None:
            rows = np.vstack([rows, shared.values[None, :]])
            labels.append("shared")
        ax.imshow(rows, aspect="auto", cmap="gray_r", vmin=0, vmax=1)
        ax.set_yticks(range(len(labels)))
        ax.set_yticklabels(labels, fontsize=7)
        ax.set_title(f"kept layers (eta={maskset.eta:g})")
        _layer_ticks(ax, maskset.layer_names)

    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_ratio_figure(
    ratios: Sequence[float], threshold: float, path: str | Path
) -> None:
    """Histogram of diversity ratios across trials with the sqrt(K) line."""
    finite = [r for r in ratios if np.isfinite(r)]
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    if finite:
        ax.hist(finite, bins=min(30, max(5, len(finite) // 4)), color="#4878a8")
    ax.axvline(threshold, color="crimson", linestyle="--", label=f"threshold {threshold:.3f}")
    ax.set_xlabel("diversity ratio")
    ax.set_ylabel("trials")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
