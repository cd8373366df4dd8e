"""PNG figures for the CLI reports: ablation bars, gallery-size sweep and
training loss. Uses the Agg canvas directly, so no display is needed and no
global pyplot state is touched."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

FONT_SIZE = 9


def _figure(width: float = 5.0, height: float = 3.2) -> tuple[Figure, object]:
    fig = Figure(figsize=(width, height), dpi=120)
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(1, 1, 1)
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.tick_params(labelsize=FONT_SIZE)
    return fig, ax


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps the bytes reproducible across runs
    fig.savefig(path, format="png", metadata={"Software": None})
    return path


def ablation_bars(means: Mapping[str, float], path: str | Path,
                  stds: Mapping[str, float] | None = None, metric: str = "mAP") -> Path:
    """One bar per variant, in the mapping's order."""
    names = list(means)
    fig, ax = _figure(max(4.0, 0.8 * len(names) + 1.5))
    err = [stds.get(n, 0.0) for n in names] if stds else None
    ax.bar(np.arange(len(names)), [means[n] for n in names], yerr=err, color="#4c72b0", capsize=3)
    ax.set_xticks(np.arange(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel(f"re-id {metric}")
    ax.set_ylim(0, max(1e-3, max(means.values()) * 1.25))
    return _save(fig, path)


def sweep_curve(sizes: Sequence[int], maps: Sequence[float], path: str | Path,
                top1: Sequence[float] | None = None) -> Path:
    fig, ax = _figure()
    ax.plot(sizes, maps, "o-", label="mAP")
    if top1 is not None:
        ax.plot(sizes, top1, "s--", label="top-1")
    ax.set_xlabel("gallery size (scenes)")
    ax.set_ylabel("score")
    ax.set_ylim(0, 1.02)
    ax.legend(frameon=False)
    return _save(fig, path)


def loss_curve(epochs: Sequence[int], totals: Sequence[float], path: str | Path,
               terms: Mapping[str, Sequence[float]] | None = None) -> Path:
    fig, ax = _figure()
    ax.plot(epochs, totals, "k-o", label="total")
    for name, values in (terms or {}).items():
        ax.plot(epochs, values, "-", lw=1, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    ax.legend(frameon=False, fontsize=7)
    return _save(fig, path)
