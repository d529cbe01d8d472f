"""Matplotlib figures for pruning and audit reports (written to files, Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import DetectionCurve  # noqa: E402
from .model import CLASSES  # noqa: E402

STYLE = {
    "font.size": 10,
    "axes.titlesize": 11,
    "axes.labelsize": 10,
    "legend.fontsize": 9,
    "xtick.direction": "in",
    "ytick.direction": "in",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    # fixed metadata keeps repeated renders byte-stable
    "svg.hashsalt": "tracemil",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def plot_confusion_matrices(matrices: Dict[str, np.ndarray], path, title: Optional[str] = None) -> Path:
    """One panel per named 3x3 matrix, rows = true class, columns = predicted."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(matrices), figsize=(3.2 * len(matrices), 3.0), squeeze=False)
        for ax, (name, cm) in zip(axes[0], matrices.items()):
            cm = np.asarray(cm)
            ax.imshow(cm, cmap="Blues", vmin=0, vmax=max(int(cm.max()), 1))
            for i in range(cm.shape[0]):
                for j in range(cm.shape[1]):
                    color = "white" if cm[i, j] > 0.6 * cm.max() else "black"
                    ax.text(j, i, str(int(cm[i, j])), ha="center", va="center", color=color)
            ax.set_xticks(range(len(CLASSES)))
            ax.set_xticklabels(CLASSES, rotation=30)
            ax.set_yticks(range(len(CLASSES)))
            ax.set_yticklabels(CLASSES)
            ax.set_xlabel("predicted")
            ax.set_ylabel("true")
            ax.set_title(name)
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_detection_curve(curve: DetectionCurve, path, mark_fraction: float = 0.30,
                         label: str = "self-influence ranking") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.6))
        x = np.concatenate([[0.0], curve.fractions])
        y = np.concatenate([[0.0], curve.recall])
        ax.step(x, y, where="post", color="tab:blue", lw=1.8, label=label)
        ax.plot([0, 1], [0, 1], ls="--", color="0.5", lw=1.0, label="random order")
        r = curve.recall_at(mark_fraction)
        ax.axvline(mark_fraction, color="0.7", lw=0.8)
        ax.annotate(f"{r:.3f} @ {mark_fraction:.2f}", xy=(mark_fraction, r), xytext=(8, -14),
                    textcoords="offset points")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("fraction of data inspected")
        ax.set_ylabel("fraction of disagreements found")
        ax.legend(loc="lower right", frameon=False)
        return _save(fig, path)


def plot_metric_vs_k(ks: Sequence[int], values: Dict[str, Sequence[float]], baseline: Dict[str, float],
                     path, ylabel: str = "test micro-AUC") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.2))
        for i, (name, ys) in enumerate(values.items()):
            color = f"C{i}"
            ax.plot(ks, ys, marker="o", color=color, label=name)
            ax.axhline(baseline[name], color=color, ls=":", lw=1.0)
        ax.set_xlabel("k removed per target")
        ax.set_ylabel(ylabel)
        ax.legend(frameon=False)
        return _save(fig, path)
