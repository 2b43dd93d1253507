"""Static figure rendering for training, evaluation, and mask analysis.

Figures are written to files next to their delimited/JSON counterparts;
everything uses the non-interactive Agg backend so reports render the
same way on headless machines.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .analysis import distance_matrix
from .vocab import Vocabulary

_DPI = 130


def loss_curve(history, path) -> None:
    """Loss vs. iteration, one colored segment per training stage."""
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    stages = sorted({stage for _, stage, _ in history})
    for stage in stages:
        xs = [it for it, s, _ in history if s == stage]
        ys = [ls for _, s, ls in history if s == stage]
        ax.plot(xs, ys, linewidth=1.2, label=f"stage {stage}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("batch loss")
    ax.set_yscale("log")
    ax.set_title("training loss")
    ax.legend(loc="upper right")
    ax.grid(True, which="both", alpha=0.25)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def mask_distance_heatmap(w_c: np.ndarray, vocab: Vocabulary, words, path) -> None:
    """Pairwise Euclidean distances between the words' mask columns."""
    ids = [vocab.lookup(w) for w in words]
    dists = distance_matrix(w_c, ids)
    size = max(4.0, 0.45 * len(words) + 1.5)
    fig, ax = plt.subplots(figsize=(size, size))
    im = ax.imshow(dists, cmap="viridis")
    ax.set_xticks(range(len(words)), labels=words, rotation=90)
    ax.set_yticks(range(len(words)), labels=words)
    ax.set_title("mask column distances")
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def metrics_chart(report, path) -> None:
    """BLEU@1..4 bars plus CIDEr-D on its own scale."""
    fig, (ax1, ax2) = plt.subplots(
        1, 2, figsize=(7.0, 3.6), gridspec_kw={"width_ratios": [4, 1]})
    labels = [f"BLEU@{k}" for k in range(1, 5)]
    ax1.bar(labels, list(report.bleu), color="#4878cf")
    ax1.set_ylim(0.0, 1.0)
    ax1.set_ylabel("score")
    ax1.set_title("BLEU")
    ax1.grid(True, axis="y", alpha=0.25)
    ax2.bar(["CIDEr-D"], [report.cider], color="#d65f5f")
    ax2.set_ylim(0.0, 10.0)
    ax2.set_title("CIDEr-D")
    ax2.grid(True, axis="y", alpha=0.25)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
