"""Figures written next to training logs and evaluation reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_training_curves(history, path) -> Path:
    """Loss components per epoch, plus validation HR/MRR when available.

    ``history`` is a list of ``(EpochStats, MetricsReport | None)``.
    """
    epochs = [s.epoch for s, _ in history]
    reports = [r for _, r in history]
    has_valid = all(r is not None for r in reports) and reports
    fig, axes = plt.subplots(1, 2 if has_valid else 1, figsize=(10 if has_valid else 5, 3.6), squeeze=False)
    ax = axes[0, 0]
    ax.plot(epochs, [s.l_rec for s, _ in history], marker="o", label="l_rec")
    if any(s.l_cl for s, _ in history):
        ax.plot(epochs, [s.l_cl for s, _ in history], marker="s", label="l_cl")
    ax.plot(epochs, [s.l_total for s, _ in history], ls="--", label="l_total")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    if has_valid:
        ax = axes[0, 1]
        for k in reports[0].ks:
            ax.plot(epochs, [r.hr[k] for r in reports], marker="o", label=f"HR@{k}")
            ax.plot(epochs, [r.mrr[k] for r in reports], ls="--", label=f"MRR@{k}")
        ax.set_xlabel("epoch")
        ax.set_ylim(0, 1)
        ax.set_ylabel("validation")
        ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_metrics(blocks: dict, path) -> Path:
    """Grouped bars of HR@K and MRR@K for each named result block."""
    names = list(blocks)
    ks = blocks[names[0]].ks
    series = [(f"HR@{k}", "hr", k) for k in ks] + [(f"MRR@{k}", "mrr", k) for k in ks]
    width = 0.8 / max(len(names), 1)
    fig, ax = plt.subplots(figsize=(1.6 * len(series) + 2, 3.6))
    for j, name in enumerate(names):
        rep = blocks[name]
        vals = [getattr(rep, attr)[k] for _, attr, k in series]
        ax.bar([i + j * width for i in range(len(series))], vals, width, label=name)
    ax.set_xticks([i + width * (len(names) - 1) / 2 for i in range(len(series))])
    ax.set_xticklabels([s[0] for s in series])
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
