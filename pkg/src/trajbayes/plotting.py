"""Figures written next to the tabular outputs of ``train`` and ``evaluate``."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}

# no timestamps or version strings in the files
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def lr_schedule(epochs, lrs, path, checkpoint_epochs=()) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 2.4))
        ax.plot(epochs, lrs, color="k")
        for t in checkpoint_epochs:
            ax.axvspan(t - 0.5, t + 0.5, color="tab:orange", alpha=0.25, lw=0)
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("learning rate")
        return _save(fig, path)


def reliability_diagram(reports, path, title: str = "") -> Path:
    """Accuracy vs. mean confidence per non-empty bin, one line per method."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.4, 3.2))
        ax.plot([0, 1], [0, 1], ls=":", color="0.5", lw=0.8)
        for r in reports:
            nz = r.bins.counts > 0
            ax.plot(r.bins.confidence[nz], r.bins.accuracy[nz], marker=".", ms=3,
                    label=f"{r.method} ({r.ece_percent:.2f}%)")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_xlabel("confidence")
        ax.set_ylabel("accuracy")
        if title:
            ax.set_title(title)
        ax.legend(loc="upper left", frameon=False)
        return _save(fig, path)


def metric_bars(reports, path, value: str = "ece_percent", ylabel: str = "ECE (%)") -> Path:
    splits = sorted({r.split for r in reports})
    methods = list(dict.fromkeys(r.method for r in reports))
    lookup = {(r.method, r.split): r for r in reports}
    width = 0.8 / max(len(methods), 1)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(1.2 + 1.4 * len(splits), 2.6))
        for i, m in enumerate(methods):
            ys = [getattr(lookup[(m, s)], value) if (m, s) in lookup else np.nan for s in splits]
            ax.bar(np.arange(len(splits)) + i * width, ys, width, label=m)
        ax.set_xticks(np.arange(len(splits)) + 0.4 - width / 2)
        ax.set_xticklabels(splits)
        ax.set_ylabel(ylabel)
        ax.legend(frameon=False, ncol=2)
        return _save(fig, path)


def uncertainty_panel(image, gt, rows, path, title: str = "") -> Path:
    """Image and label, then predicted labels and entropy map for each method.

    ``rows`` maps method name to ``(labels, entropy)``.
    """
    n = len(rows)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(2, n + 1, figsize=(1.6 * (n + 1), 3.4), squeeze=False)
        axes[0, 0].imshow(image, cmap="gray", vmin=0, vmax=1)
        axes[0, 0].set_title("image")
        axes[1, 0].imshow(gt, cmap="viridis", vmin=0, vmax=3, interpolation="nearest")
        axes[1, 0].set_title("label")
        vmax = max(float(np.max(e)) for _, e in rows.values()) or 1.0
        for j, (name, (lab, ent)) in enumerate(rows.items(), 1):
            axes[0, j].imshow(lab, cmap="viridis", vmin=0, vmax=3, interpolation="nearest")
            axes[0, j].set_title(name)
            axes[1, j].imshow(ent, cmap="magma", vmin=0, vmax=vmax)
        for ax in axes.ravel():
            ax.set_xticks([])
            ax.set_yticks([])
        if title:
            fig.suptitle(title)
        return _save(fig, path)
