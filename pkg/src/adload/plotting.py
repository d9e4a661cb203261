"""Figures written next to the CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def plot_cost_curves(curves: dict, path, title="Cost curves"):
    """``curves`` maps a label to a ``CostCurve``."""
    fig, ax = plt.subplots(figsize=(5, 4.5))
    ax.plot([0, 1], [0, 1], color="0.6", ls="--", lw=1, label="random (0.5)")
    for label, c in curves.items():
        ax.plot(c.x, c.y, lw=1.5, label=f"{label} ({c.aucc:.3f})")
    ax.set_xlabel("normalized engagement loss")
    ax.set_ylabel("normalized revenue gain")
    ax.set_title(title)
    ax.legend(fontsize=8, loc="lower right")
    _save(fig, path)


def plot_sweeps(table: dict, path):
    """``table[param][label] = (grid, mean, std)``; one panel per parameter."""
    params = list(table)
    fig, axes = plt.subplots(1, len(params), figsize=(4.2 * len(params), 3.6), squeeze=False)
    for ax, param in zip(axes[0], params):
        for label, (grid, mean, std) in table[param].items():
            grid, mean, std = map(np.asarray, (grid, mean, std))
            ax.plot(grid, mean, marker="o", lw=1.5, label=label)
            ax.fill_between(grid, mean - std, mean + std, alpha=0.15)
        ax.set_xlabel(param)
        ax.set_ylabel("cumulative reward")
        ax.set_ylim(0, 520)
        ax.legend(fontsize=8)
    _save(fig, path)


def plot_trend(Ns, Ts, mean, se, path):
    fig, ax = plt.subplots(figsize=(5, 4))
    for j, n in enumerate(Ns):
        ax.errorbar(Ts, mean[j], yerr=2 * se[j], marker="o", capsize=3, label=f"N={n}")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("FQI iterations T")
    ax.set_ylabel("robust suboptimality")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_distill(rows, path):
    labels = [r[0] for r in rows]
    values = [r[1] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(range(len(values)), values, color=["#4c72b0", "#55a868", "#c44e52"][: len(values)])
    ax.set_xticks(range(len(values)), labels, rotation=15, fontsize=8)
    ax.set_ylabel("test AUCC")
    ax.axhline(0.5, color="0.6", ls="--", lw=1)
    _save(fig, path)
