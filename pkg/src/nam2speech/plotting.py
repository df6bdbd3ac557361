"""Matplotlib figures for run reports (file output only, Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps re-runs byte-identical
    fig.savefig(path, dpi=90, metadata={"Software": None})
    plt.close(fig)
    return path


def mel_comparison(panels: Mapping[str, np.ndarray], path, title: str = "") -> Path:
    """Stack of log-mel images sharing one colour scale."""
    mats = [np.asarray(m) for m in panels.values()]
    lo = min(float(m.min()) for m in mats)
    hi = max(float(m.max()) for m in mats)
    fig, axes = plt.subplots(len(mats), 1, figsize=(7, 1.8 * len(mats) + 0.4), squeeze=False)
    for ax, (name, m) in zip(axes[:, 0], panels.items()):
        im = ax.imshow(np.asarray(m).T, origin="lower", aspect="auto", vmin=lo, vmax=hi, cmap="magma")
        ax.set_ylabel(name)
    axes[-1, 0].set_xlabel("frame (50 Hz)")
    fig.colorbar(im, ax=axes[:, 0].tolist(), shrink=0.8, label="log magnitude")
    if title:
        axes[0, 0].set_title(title)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=90, metadata={"Software": None})
    plt.close(fig)
    return path


def alignment(features: np.ndarray, planted: Sequence[int], predicted: Sequence[int], path,
              title: str = "") -> Path:
    """Feature image with planted (white) and predicted (cyan) segment boundaries."""
    fig, ax = plt.subplots(figsize=(7, 2.6))
    ax.imshow(np.asarray(features).T, origin="lower", aspect="auto", cmap="viridis")
    for b in np.cumsum(planted)[:-1]:
        ax.axvline(b - 0.5, color="white", lw=1.2)
    for b in np.cumsum(predicted)[:-1]:
        ax.axvline(b - 0.5, color="cyan", lw=1.0, ls="--")
    ax.set_xlabel("frame")
    ax.set_ylabel("feature dim")
    ax.set_title(title or "planted (solid) vs aligned (dashed) boundaries")
    return _save(fig, path)


def loss_curves(histories: Mapping[str, Sequence[float]], path, ylabel: str = "loss", log_y: bool = True) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for name, h in histories.items():
        ax.plot(np.arange(1, len(h) + 1), h, label=name)
    if log_y:
        ax.set_yscale("log")
    ax.set_xlabel("epoch / step")
    ax.set_ylabel(ylabel)
    ax.legend()
    return _save(fig, path)


def error_rates(ids: Sequence[str], series: Mapping[str, Sequence[float]], path, metric: str = "WER (%)") -> Path:
    """Per-utterance error rates, one bar group per utterance."""
    n = len(ids)
    k = max(len(series), 1)
    width = 0.8 / k
    fig, ax = plt.subplots(figsize=(max(5, 0.25 * n + 2), 3.2))
    x = np.arange(n)
    for i, (name, vals) in enumerate(series.items()):
        ax.bar(x + i * width, vals, width, label=name)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(ids, rotation=90, fontsize=6)
    ax.set_ylabel(metric)
    ax.legend()
    return _save(fig, path)
