"""Matplotlib renderings that accompany the CSV reports.

Every report-producing command drops a figure next to its delimited
output: loss and weight curves for training, a polar sketch of pairwise
gradient angles for diagnosis, and bar charts for evaluation and
ablation tables.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .autograd import ShapeError


def loss_curves(losses: np.ndarray, tasks, path, weights: np.ndarray | None = None):
    """Per-task loss curves, optionally with the combination weights below."""
    losses = np.asarray(losses)
    if losses.ndim != 2 or losses.shape[1] != len(tasks):
        raise ShapeError(f"loss_curves: history {losses.shape} does not match "
                         f"{len(tasks)} tasks")
    n_rows = 2 if weights is not None else 1
    fig, axes = plt.subplots(n_rows, 1, figsize=(7, 3.2 * n_rows), squeeze=False)
    ax = axes[0][0]
    for m, t in enumerate(tasks):
        ax.plot(losses[:, m], label=t)
    ax.set_xlabel("iteration")
    ax.set_ylabel("task loss")
    ax.set_yscale("log")
    ax.legend()
    if weights is not None:
        ax = axes[1][0]
        for m, t in enumerate(tasks):
            ax.plot(np.asarray(weights)[:, m], label=t)
        ax.set_xlabel("iteration")
        ax.set_ylabel("combination weight")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def conflict_polar(reports, tasks, path):
    """Polar scatter of pairwise gradient angles, radius showing the smaller
    of the two gradient norms, shaded by iteration order."""
    if not reports:
        raise ShapeError("conflict_polar: no reports to draw")
    fig = plt.figure(figsize=(5.5, 5.5))
    ax = fig.add_subplot(111, projection="polar")
    ax.set_thetamin(0)
    ax.set_thetamax(180)
    n = len(reports)
    for order, rep in enumerate(reports):
        m = len(rep.norms)
        shade = 0.25 + 0.75 * (order + 1) / n
        for i in range(m):
            for j in range(i + 1, m):
                r = min(rep.norms[i], rep.norms[j])
                ax.plot(np.radians(rep.angles_deg[i, j]), r, "o",
                        color=plt.cm.viridis(shade), markersize=4,
                        label=f"{tasks[i]}/{tasks[j]}" if order == n - 1 else None)
    ax.set_title("pairwise gradient angle vs norm")
    if len(tasks) >= 2:
        ax.legend(loc="lower left", fontsize=8)
    fig.savefig(path)
    plt.close(fig)


def bar_chart(labels, values, ylabel, path):
    """One bar per label; used for evaluation and ablation summaries."""
    if len(labels) != len(values):
        raise ShapeError(f"bar_chart: {len(labels)} labels for {len(values)} values")
    fig, ax = plt.subplots(figsize=(max(5.0, 0.55 * len(labels) + 2), 4))
    ax.bar(range(len(labels)), values, color="#4878b0")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
