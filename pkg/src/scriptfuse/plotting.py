"""PNG figures for run reports. Uses the Agg canvas directly, never pyplot."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure


def _save(fig: Figure, path: str | Path) -> None:
    FigureCanvasAgg(fig)
    # no Software/date chunks, so identical figures give identical bytes
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None})


def plot_layer_curve(curve: list[dict], path: str | Path, best: int | None = None) -> None:
    layers = [r["layer"] for r in curve]
    fig = Figure(figsize=(5, 3.5))
    ax = fig.add_subplot()
    ax.plot(layers, [r["val_f1"] for r in curve], "o-", label="validation")
    ax.plot(layers, [r["test_f1"] for r in curve], "s--", label="test")
    if best is not None:
        ax.axvline(best, color="grey", lw=0.8, ls=":")
    ax.set_xticks(layers)
    ax.set_xlabel("alignment layer")
    ax.set_ylabel("weighted F1")
    ax.legend(loc="lower right")
    fig.tight_layout()
    _save(fig, path)


def plot_loss_curves(epochs: list[dict], path: str | Path) -> None:
    x = [e["epoch"] for e in epochs]
    fig = Figure(figsize=(6, 3.5))
    ax, ax2 = fig.subplots(1, 2)
    for key in ("ce", "sa", "reg", "loss"):
        ys = [e[key] for e in epochs]
        if all(y is not None for y in ys):
            ax.plot(x, ys, marker=".", label=key)
    ax.set_xlabel("epoch")
    ax.set_title("training losses")
    ax.legend()
    ax2.plot(x, [e["val_f1"] for e in epochs], "o-")
    ax2.set_xlabel("epoch")
    ax2.set_title("validation weighted F1")
    fig.tight_layout()
    _save(fig, path)


def plot_confusion(cm, labels, path: str | Path) -> None:
    cm = np.asarray(cm)
    fig = Figure(figsize=(4, 3.5))
    ax = fig.add_subplot()
    ax.imshow(cm, cmap="Blues")
    ax.set_xticks(range(len(labels)), labels)
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    top = cm.max() if cm.size else 0
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, str(cm[i, j]), ha="center", va="center",
                    color="white" if top and cm[i, j] > top / 2 else "black")
    fig.tight_layout()
    _save(fig, path)
