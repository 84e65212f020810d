"""Figures written next to the CSV/JSON reports. Uses the Agg backend only."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss(trace, path, title="training loss"):
    steps = [s for s, _ in trace]
    losses = [l for _, l in trace]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.plot(steps, losses, lw=1)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("mean epsilon loss")
        ax.set_title(title)
        return _save(fig, path)


def plot_accuracy(report, path):
    names = [report.class_names.get(c, str(c)) for c in report.accuracy]
    x = np.arange(len(names))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        width = 0.38 if report.multiclass_accuracy else 0.6
        ax.bar(x - (width / 2 if report.multiclass_accuracy else 0), list(report.accuracy.values()), width, label="one-vs-rest")
        if report.multiclass_accuracy:
            ax.bar(x + width / 2, list(report.multiclass_accuracy.values()), width, label="multiclass")
        ax.set_xticks(x, names)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("accuracy")
        ax.axhline(report.mean_accuracy, color="k", lw=0.8, ls="--")
        ax.legend(frameon=False, fontsize=8)
        return _save(fig, path)


def plot_confusion(cm, class_names, path):
    cm = np.asarray(cm)
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, ax = plt.subplots(figsize=(3.6, 3.2))
        ax.imshow(cm, cmap="Blues")
        for i in range(cm.shape[0]):
            for j in range(cm.shape[1]):
                ax.text(j, i, str(cm[i, j]), ha="center", va="center", fontsize=8)
        ax.set_xticks(range(len(class_names)), class_names)
        ax.set_yticks(range(len(class_names)), class_names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        return _save(fig, path)


def plot_ablation(rows, path):
    """Two panels: wall time and accuracy against image size, one line per view count."""
    counts = sorted({r["n_views"] for r in rows})
    with plt.rc_context(STYLE):
        fig, (ax_t, ax_a) = plt.subplots(1, 2, figsize=(7, 3))
        for n in counts:
            sub = sorted((r for r in rows if r["n_views"] == n), key=lambda r: r["size"])
            sizes = [r["size"] for r in sub]
            ax_t.plot(sizes, [r["seconds"] for r in sub], marker="o", label=f"{n} view(s)")
            ax_a.plot(sizes, [r["accuracy"] for r in sub], marker="o", label=f"{n} view(s)")
        for ax in (ax_t, ax_a):
            ax.set_xscale("log", base=2)
            ax.set_xlabel("image size S")
        ax_t.set_ylabel("wall time (s)")
        ax_a.set_ylabel("accuracy")
        ax_a.set_ylim(0, 1.05)
        ax_t.legend(frameon=False, fontsize=8)
        return _save(fig, path)


def plot_views(images, path, titles=None):
    n = len(images)
    cols = min(n, 6)
    rows = -(-n // cols)
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, axes = plt.subplots(rows, cols, figsize=(1.6 * cols, 1.6 * rows), squeeze=False)
        for k, ax in enumerate(axes.flat):
            ax.axis("off")
            if k < n:
                ax.imshow(images[k], cmap="gray", vmin=0, vmax=1)
                if titles:
                    ax.set_title(titles[k], fontsize=7)
        return _save(fig, path)
