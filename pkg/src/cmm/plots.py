"""SVG figure rendering for evaluation reports and training traces."""

from __future__ import annotations

import math

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

matplotlib.rcParams["svg.hashsalt"] = "cmm"

_SAVE_KW = {"format": "svg", "metadata": {"Date": None}}


def plot_rank_curves(reports, path):
    """Rank-K vs K for every (direction, reranked) report variant."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for (direction, reranked), rep in sorted(reports.items()):
        ks = sorted(rep.rank_k)
        label = f"{direction} ({'rerank' if reranked else 'plain'})"
        style = "-" if not reranked else "--"
        ax.plot(ks, [rep.rank_k[k] for k in ks], style, marker="o", label=label)
    ax.set_xlabel("K")
    ax.set_ylabel("Rank-K (%)")
    ax.set_ylim(0, 105)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_training_curves(trace, path):
    """Per-epoch loss components and validation Rank-1."""
    epochs = [r["epoch"] for r in trace]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    for key in ("lcmc", "lalign", "lid", "total"):
        ax1.plot(epochs, [r[key] for r in trace], label=key)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax1.grid(alpha=0.3)
    val = [(e, r["val_rank1"]) for e, r in zip(epochs, trace)
           if not math.isnan(r["val_rank1"])]
    if val:
        ax2.plot([v[0] for v in val], [v[1] for v in val], marker="o")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("val Rank-1 (%)")
    ax2.set_ylim(0, 105)
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
