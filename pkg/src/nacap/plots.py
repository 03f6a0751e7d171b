"""Figure rendering for the report paths (all matplotlib, headless backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def speedup_vs_cider(rows, out_path):
    """Scatter of relative decoding speedup against CIDEr-D per config."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for row in rows:
        ax.scatter(row["speedup"], row.get("cider_d", float("nan")), s=40)
        ax.annotate(row["config"], (row["speedup"], row.get("cider_d", 0.0)),
                    fontsize=8, xytext=(4, 4), textcoords="offset points")
    ax.set_xlabel("relative decoding speed-up")
    ax.set_ylabel("CIDEr-D")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def per_position_usage(usage_pct, out_path, label=""):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    positions = np.arange(1, len(usage_pct) + 1)
    ax.bar(positions, usage_pct, color="#4878a8")
    ax.set_xlabel("sentence position")
    ax.set_ylabel("vocabulary usage (%)")
    if label:
        ax.set_title(label)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def refinement_heatmap(update_matrix, out_path, title=""):
    """Probability of generating a new word at position n during iteration t."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    im = ax.imshow(update_matrix, aspect="auto", cmap="Blues", origin="upper")
    ax.set_xlabel("sentence position")
    ax.set_ylabel("iteration")
    ax.set_xticks(np.arange(update_matrix.shape[1]),
                  [str(i + 1) for i in range(update_matrix.shape[1])])
    ax.set_yticks(np.arange(update_matrix.shape[0]),
                  [str(i + 1) for i in range(update_matrix.shape[0])])
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path
