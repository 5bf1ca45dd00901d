"""Static report figures (matplotlib, Agg backend)."""

from __future__ import annotations

from typing import List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def error_curve(curve: Sequence[float], path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    steps = np.arange(1, len(curve) + 1)
    ax.plot(steps, curve, marker="o", ms=3)
    ax.set_xlabel("prediction step")
    ax.set_ylabel("nRMSE")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def field_panels(truth: np.ndarray, pred: np.ndarray, path) -> None:
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.2))
    lim = np.abs(truth).max()
    for ax, img, title in zip(axes, (truth, pred, pred - truth), ("reference", "prediction",
                                                                    "difference")):
        im = ax.imshow(img.T, origin="lower", cmap="RdBu_r", vmin=-lim, vmax=lim)
        ax.set_title(title)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes, shrink=0.8)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def learning_curves(records: List[dict], path) -> None:
    stages = list(dict.fromkeys(r["stage"] for r in records))
    fig, ax = plt.subplots(figsize=(6, 4))
    for stage in stages:
        rs = [r for r in records if r["stage"] == stage]
        ep = [r["epoch"] for r in rs]
        line, = ax.semilogy(ep, [r["train_loss"] for r in rs], label=f"{stage} train")
        ax.semilogy(ep, [r["val_loss"] for r in rs], "--", color=line.get_color(),
                    label=f"{stage} val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("nRMSE loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def sweep_grid(rows: List[dict], keys: List[str], path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if len(keys) == 2:
        a, b = keys
        va = list(dict.fromkeys(r[a] for r in rows))
        vb = list(dict.fromkeys(r[b] for r in rows))
        grid = np.full((len(va), len(vb)), np.nan)
        for r in rows:
            grid[va.index(r[a]), vb.index(r[b])] = r["mean"]
        im = ax.imshow(grid, cmap="viridis")
        ax.set_yticks(range(len(va)), [str(v) for v in va])
        ax.set_xticks(range(len(vb)), [str(v) for v in vb])
        ax.set_ylabel(a)
        ax.set_xlabel(b)
        for (i, j), v in np.ndenumerate(grid):
            ax.text(j, i, f"{v:.3f}", ha="center", va="center", color="w", fontsize=7)
        fig.colorbar(im, ax=ax, label="mean nRMSE")
    else:
        labels = [",".join(str(r[k]) for k in keys) for r in rows]
        ax.bar(labels, [r["mean"] for r in rows])
        ax.set_ylabel("mean nRMSE")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
