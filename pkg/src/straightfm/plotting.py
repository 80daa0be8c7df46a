"""Matplotlib figures written next to the CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

VIEWPORT = (-4.5, 4.5)
STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "svg.hashsalt": "straightfm",  # stable element ids across runs
}


def _square_axes(ax):
    ax.set_xlim(*VIEWPORT)
    ax.set_ylim(*VIEWPORT)
    ax.set_aspect("equal")
    ax.set_xlabel("$x_0$")
    ax.set_ylabel("$x_1$")


def plot_samples(path, points, trajectories=None, reference=None, title=None, max_paths=200):
    """Scatter of generated points, optionally over reference data and sample paths.

    ``trajectories`` is a (K, n, 2) array of states.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        if reference is not None:
            ax.scatter(reference[:, 0], reference[:, 1], s=3, c="0.7", lw=0, label="data")
        if trajectories is not None:
            for i in range(min(max_paths, trajectories.shape[1])):
                ax.plot(trajectories[:, i, 0], trajectories[:, i, 1], lw=0.4, color="tab:gray", alpha=0.5)
        points = np.asarray(points)
        ax.scatter(points[:, 0], points[:, 1], s=3, c="tab:blue", lw=0, label="generated")
        _square_axes(ax)
        if title:
            ax.set_title(title)
        if reference is not None:
            ax.legend(loc="upper right", markerscale=3)
        fig.tight_layout()
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)


def plot_report(path, report):
    """One panel per metric, value against number of Euler steps."""
    metrics = sorted({row[0] for row in report.rows})
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3.0), squeeze=False)
        for ax, metric in zip(axes[0], metrics):
            rows = sorted((r for r in report.rows if r[0] == metric), key=lambda r: r[1])
            ax.plot([r[1] for r in rows], [r[2] for r in rows], "o-", color="tab:blue")
            ax.set_xscale("log")
            ax.set_xlabel("Euler steps")
            ax.set_title(metric)
            ax.grid(True, which="both", lw=0.3)
        fig.tight_layout()
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)


def plot_training_log(path, iters, columns: dict, window: int = 200):
    """Moving averages of the logged loss columns."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        iters = np.asarray(iters)
        for name, values in columns.items():
            values = np.asarray(values, dtype=float)
            if not np.any(values):
                continue
            w = min(window, len(values))
            smooth = np.convolve(values, np.ones(w) / w, mode="valid")
            ax.plot(iters[w - 1 :], smooth, lw=1.0, label=name)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)
