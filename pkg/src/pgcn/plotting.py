"""Figures for training and evaluation runs, written as PNG files."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import RunReport, band_labels  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_confusion(confusion: np.ndarray, path: str | Path, class_names: Sequence[str] = ()) -> Path:
    cm = np.asarray(confusion, dtype=float)
    rows = cm.sum(axis=1, keepdims=True)
    frac = np.divide(cm, rows, out=np.zeros_like(cm), where=rows > 0)
    names = list(class_names) or [str(i) for i in range(cm.shape[0])]
    fig, ax = plt.subplots(figsize=(1.0 + 0.7 * len(names), 0.8 + 0.7 * len(names)))
    im = ax.imshow(frac, vmin=0, vmax=1, cmap="Blues")
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, int(cm[i, j]), ha="center", va="center",
                    color="white" if frac[i, j] > 0.5 else "black", fontsize=8)
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)


def plot_fold_accuracy(report: RunReport, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(max(4.0, 0.4 * len(report.fold_ids) + 1), 3))
    labels = [str(h if h is not None else f) for f, h in
              zip(report.fold_ids, report.held_out or [None] * len(report.fold_ids))]
    ax.bar(range(len(labels)), report.fold_accuracies, color="tab:blue")
    ax.axhline(report.mean, color="k", lw=1, ls="--", label=f"mean {report.mean:.3f}")
    ax.set_xticks(range(len(labels)), labels)
    ax.set_ylim(0, 1)
    ax.set_xlabel("fold")
    ax.set_ylabel("accuracy")
    ax.legend(loc="lower right", fontsize=8)
    return _save(fig, path)


def plot_scalp_bars(scalp: np.ndarray, path: str | Path, channel_names: Sequence[str] = ()) -> Path:
    """One bar chart per band of normalised electrode contributions."""
    d, n = scalp.shape
    names = list(channel_names) or [f"ch{i}" for i in range(n)]
    fig, axes = plt.subplots(d, 1, figsize=(max(6.0, 0.18 * n), 1.4 * d), sharex=True, squeeze=False)
    for b, (ax, band) in enumerate(zip(axes[:, 0], band_labels(d))):
        ax.bar(range(n), scalp[b], color=plt.cm.viridis(b / max(d - 1, 1)))
        ax.set_ylabel(band, rotation=0, ha="right", va="center")
        ax.set_ylim(0, 1.05)
    axes[-1, 0].set_xticks(range(n), names, rotation=90, fontsize=6)
    return _save(fig, path)


def plot_training_curves(records: Sequence[dict], path: str | Path) -> Path:
    epochs = [r["epoch"] for r in records]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(epochs, [r["fine_loss"] for r in records], label="fine loss")
    if any(r["coarse_loss"] for r in records):
        ax.plot(epochs, [r["coarse_loss"] for r in records], label="coarse loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss per sample")
    acc = ax.twinx()
    acc.plot(epochs, [r["train_accuracy"] for r in records], color="tab:green", ls=":", label="train acc")
    acc.set_ylim(0, 1)
    acc.set_ylabel("accuracy")
    lines = ax.get_lines() + acc.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], fontsize=8, loc="center right")
    return _save(fig, path)
