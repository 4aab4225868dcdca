"""Matplotlib figure rendering for the report path. Every function writes a
PNG next to the delimited outputs and returns the path."""

from __future__ import annotations

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt


def training_curves(log_rows, path, title="training"):
    """Loss components, retained pseudo-label fraction, and test F1 by epoch."""
    epochs = [r["epoch"] for r in log_rows]
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))

    for key, label in (("l_cl_ST", "classification"), ("l_dom_ST", "domain S/T"),
                       ("l_dom_UU", "domain U"), ("l_orth_ST", "orthogonality S/T"),
                       ("l_orth_UU", "orthogonality U"), ("l_pl_U", "pseudo-label")):
        axes[0].plot(epochs, [r[key] for r in log_rows], label=label, lw=1)
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("loss")
    axes[0].legend(fontsize=7)

    axes[1].plot(epochs, [r["retained_fraction"] for r in log_rows], color="tab:orange")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("retained pseudo-label fraction")
    axes[1].set_ylim(-0.02, 1.02)

    axes[2].plot(epochs, [r["test_weighted_f1"] for r in log_rows], color="tab:green")
    axes[2].set_xlabel("epoch")
    axes[2].set_ylabel("test weighted F1")
    axes[2].set_ylim(0, 1)

    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def budget_curve(series, path):
    """Mean±std F1 against label budget, one line per configuration label.
    series: {label: [(budget, mean, std), ...]}"""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for label, points in sorted(series.items()):
        points = sorted(points)
        budgets = [p[0] for p in points]
        means = [p[1] for p in points]
        stds = [p[2] for p in points]
        ax.errorbar(budgets, means, yerr=stds, marker="o", capsize=3, label=label)
    ax.set_xlabel("labels per class")
    ax.set_ylabel("weighted F1")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def config_bars(rows, path):
    """Mean±std F1 per configuration label. rows: [(label, mean, std), ...]"""
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(rows) + 1.5), 4))
    labels = [r[0] for r in rows]
    means = [r[1] for r in rows]
    stds = [r[2] for r in rows]
    ax.bar(range(len(rows)), means, yerr=stds, capsize=3, color="tab:blue")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("weighted F1")
    lo = max(0.0, min(means) - 3 * (max(stds) if stds else 0.05) - 0.05)
    ax.set_ylim(lo, min(1.0, max(means) + 3 * (max(stds) if stds else 0.05) + 0.02))
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
