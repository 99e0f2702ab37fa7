"""Minimal static SVG figures (line, scatter, bar)."""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dynamics import atomic_write_text  # noqa: E402

plt.rcParams["svg.hashsalt"] = "nbeddyn"
plt.rcParams["svg.fonttype"] = "none"


def _save(fig, path: str | Path) -> None:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    atomic_write_text(path, buf.getvalue())


def line_plot(path, t, curves: dict[str, np.ndarray], title: str = "", xlabel: str = "t", ylabel: str = "", logy: bool = False) -> None:
    fig, ax = plt.subplots(figsize=(8, 3))
    for label, y in curves.items():
        ax.plot(t[: len(y)], y, label=label, lw=1.2)
    if logy:
        ax.set_yscale("log")
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(curves) > 1:
        ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def latent_projection_plot(path, states: np.ndarray, title: str = "") -> None:
    """Two 2-d panels of the first three state coordinates: (X1, X2) and (X1, X3)."""
    states = np.atleast_2d(states)
    d = states.shape[1]
    pairs = [(0, 1), (0, 2)] if d >= 3 else [(0, min(1, d - 1))]
    fig, axes = plt.subplots(1, len(pairs), figsize=(4 * len(pairs), 3.6), squeeze=False)
    for ax, (i, j) in zip(axes[0], pairs):
        ax.plot(states[:, i], states[:, j], lw=0.4)
        ax.set_xlabel(f"X{i + 1}")
        ax.set_ylabel(f"X{j + 1}")
    fig.suptitle(title)
    fig.tight_layout()
    _save(fig, path)


def bar_plot(path, labels: list[str], values: np.ndarray, title: str = "", ylabel: str = "", logy: bool = False) -> None:
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(np.arange(len(values)), values, tick_label=labels)
    if logy:
        ax.set_yscale("log")
    ax.set_title(title)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    _save(fig, path)


def scatter_plot(path, x: np.ndarray, y: np.ndarray, title: str = "", xlabel: str = "", ylabel: str = "") -> None:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(x, y, s=4)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    _save(fig, path)
