"""Figures for evaluation runs (headless matplotlib)."""

from __future__ import annotations

import os
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .continuity import LanePointSet, render_point_sets  # noqa: E402
from .report import MODE_TITLES, present_modes  # noqa: E402

_LANE_COLORS = np.array([[0, 0, 0], [230, 60, 60], [60, 200, 80], [70, 110, 240], [240, 200, 40]]) / 255.0


def _colorize(mask: np.ndarray) -> np.ndarray:
    return _LANE_COLORS[np.clip(mask, 0, len(_LANE_COLORS) - 1)]


def ablation_chart(results: Mapping[str, object], path: str | os.PathLike) -> None:
    """Grouped bars of F1 per mode, one bar per variant."""
    modes = present_modes(results)
    variants = list(results)
    x = np.arange(len(modes))
    width = 0.8 / max(1, len(variants))
    fig, ax = plt.subplots(figsize=(1.3 * len(modes) + 2, 3.2))
    for i, v in enumerate(variants):
        vals = [results[v].culane[m].f1 * 100 if m in results[v].culane else 0.0 for m in modes]
        ax.bar(x + (i - (len(variants) - 1) / 2) * width, vals, width, label=v)
    ax.set_xticks(x, [MODE_TITLES[m] for m in modes])
    ax.set_ylabel("F1 (x100)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def qualitative_panel(images: np.ndarray, rough: Sequence[Sequence[LanePointSet]],
                      refined: Sequence[Sequence[LanePointSet]] | None,
                      truth: Sequence[Sequence[LanePointSet]], path: str | os.PathLike,
                      titles: Sequence[str] | None = None) -> None:
    """Rows of input / rough / refined / ground truth for a few images."""
    n = len(images)
    cols = 4 if refined is not None else 3
    fig, axes = plt.subplots(n, cols, figsize=(2.4 * cols, 1.4 * n + 0.4), squeeze=False)
    h, w = images.shape[-2:]
    for r in range(n):
        panels = [np.clip(images[r].transpose(1, 2, 0), 0, 1),
                  _colorize(render_point_sets(rough[r], h, w))]
        if refined is not None:
            panels.append(_colorize(render_point_sets(refined[r], h, w)))
        panels.append(_colorize(render_point_sets(truth[r], h, w)))
        for c, img in enumerate(panels):
            ax = axes[r, c]
            ax.imshow(img, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
        if titles is not None:
            axes[r, 0].set_ylabel(titles[r], fontsize=7)
    heads = ["input", "rough", "refined", "truth"] if refined is not None else ["input", "rough", "truth"]
    for c, name in enumerate(heads):
        axes[0, c].set_title(name, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
