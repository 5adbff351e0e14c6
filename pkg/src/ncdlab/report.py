"""Figure rendering for training logs, sweeps, and relation profiles.

Everything draws to files through the Agg backend; no display is needed.
Figures accompany the delimited outputs, they never replace them.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_training_curves(records: list[dict], path) -> None:
    """Loss terms and accuracy metrics per epoch, side by side."""
    epochs = [r["epoch"] for r in records]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(11, 4))
    for key in ("l_sup", "l_u", "l_rkd", "total"):
        ax_loss.plot(epochs, [r[key] for r in records], label=key)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(fontsize=8)
    for key in ("train_novel_acc", "known_acc", "novel_cluster_acc", "all_acc"):
        ax_acc.plot(epochs, [r[key] for r in records], label=key)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0.0, 1.02)
    ax_acc.legend(fontsize=8, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep(rows: list[dict], metric: str, path) -> None:
    """Mean with a +-1 std band of one metric across the sweep grid."""
    values = []
    for row in rows:
        if row["value"] not in values:
            values.append(row["value"])
    means, stds = [], []
    for value in values:
        samples = [float(r[metric]) for r in rows
                   if r["value"] == value and r[metric] != ""]
        means.append(np.mean(samples) if samples else np.nan)
        stds.append(np.std(samples) if samples else np.nan)
    means, stds = np.array(means), np.array(stds)
    positions = np.arange(len(values))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(positions, means, yerr=stds, marker="o", capsize=3)
    ax.set_xticks(positions)
    ax.set_xticklabels([str(v) for v in values], rotation=30, ha="right")
    ax.set_xlabel("swept value")
    ax.set_ylabel(metric)
    ax.set_ylim(0.0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_relation_profiles(oracle: np.ndarray, teacher: np.ndarray,
                           student: np.ndarray, path) -> None:
    """Grouped bars per novel class: oracle vs teacher vs student affinity."""
    n_novel, n_known = oracle.shape
    fig, axes = plt.subplots(n_novel, 1, figsize=(7, 1.9 * n_novel),
                             sharex=True, squeeze=False)
    x = np.arange(n_known)
    width = 0.27
    for i in range(n_novel):
        ax = axes[i, 0]
        ax.bar(x - width, oracle[i], width, label="oracle")
        ax.bar(x, teacher[i], width, label="teacher")
        ax.bar(x + width, student[i], width, label="student")
        ax.set_ylabel(f"novel {i}", fontsize=8)
        if i == 0:
            ax.legend(fontsize=7, ncol=3)
    axes[-1, 0].set_xlabel("known class")
    axes[-1, 0].set_xticks(x)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_confusion(confusion: np.ndarray, path) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    image = ax.imshow(confusion, cmap="viridis")
    ax.set_xlabel("predicted class")
    ax.set_ylabel("true class")
    fig.colorbar(image, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
