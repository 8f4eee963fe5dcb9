"""Figure rendering for the CLI report paths.

Every figure is written to a file next to the delimited output it
illustrates; nothing here affects numerics.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def save_heatmap(values: np.ndarray, path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(values, cmap="magma", interpolation="nearest")
    fig.colorbar(im, ax=ax, fraction=0.046)
    if title:
        ax.set_title(title)
    ax.set_xlabel("column")
    ax.set_ylabel("row")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_state_pair(x_map: np.ndarray, h_map: np.ndarray, path) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.6))
    for ax, data, name in zip(axes, (x_map, h_map), ("raw states", "fused states")):
        im = ax.imshow(data, cmap="viridis", interpolation="nearest")
        ax.set_title(name)
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_curve(values: np.ndarray, path, ylabel: str = "loss", title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.plot(np.arange(len(values)), values, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_bench_chart(reports, path) -> None:
    labels = [f"{r.op}\n{r.size}" for r in reports]
    times_us = [r.median_ns / 1e3 for r in reports]
    fig, ax = plt.subplots(figsize=(max(6, 0.8 * len(labels)), 3.8))
    ax.bar(np.arange(len(labels)), times_us, color="#366fa1")
    ax.set_xticks(np.arange(len(labels)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("median time (us)")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
