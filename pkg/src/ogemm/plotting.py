"""Matplotlib figures written next to the CSV outputs (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .trace import METRICS, OptimizationTrace  # noqa: E402

YLABELS = {"reward": "accumulated avg. reward", "t_max": r"$T_{max}$", "t_diff": r"$T_{diff}$",
           "thickness": "total thickness (nm)"}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_spectrum(wavelengths_nm, curves: dict[str, tuple[np.ndarray, np.ndarray]], path) -> Path:
    """``curves`` maps a label to its (T, R) arrays."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, (T, R) in curves.items():
        ax.plot(wavelengths_nm, T, label=f"T {label}")
        ax.plot(wavelengths_nm, R, ls="--", label=f"R {label}")
    ax.set_xlabel("wavelength (nm)")
    ax.set_ylabel("power fraction")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_histogram(centers, counts, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    centers = np.asarray(centers)
    width = centers[1] - centers[0] if len(centers) > 1 else 1.0
    ax.bar(centers, counts, width=width, color="tab:blue", alpha=0.8)
    ax.set_xlabel("GEMM error")
    ax.set_ylabel("count")
    if title:
        ax.set_title(title, fontsize=9)
    return _save(fig, path)


def plot_levels(levels, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(np.arange(len(levels)), levels, "o-", ms=3)
    ax.set_xlabel("level index")
    ax.set_ylabel("transmittance")
    return _save(fig, path)


def plot_traces(traces: list[OptimizationTrace], path, metrics=METRICS) -> Path:
    """Accumulated averages with min/max bands across runs, one panel per metric."""
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3))
    axes = np.atleast_1d(axes)
    for tr in traces:
        x = np.arange(tr.n_iters)
        for ax, m in zip(axes, metrics):
            line, = ax.plot(x, tr.mean_curve(m), label=tr.label or None)
            if tr.n_runs > 1:
                lo, hi = tr.band(m)
                ax.fill_between(x, lo, hi, color=line.get_color(), alpha=0.2, lw=0)
    for ax, m in zip(axes, metrics):
        ax.set_xlabel("iteration")
        ax.set_ylabel(YLABELS[m])
    if any(t.label for t in traces):
        axes[0].legend(fontsize=7)
    return _save(fig, path)


def plot_training_curve(values, path, ylabel: str = "reward") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    v = np.asarray(values, dtype=float)
    ax.plot(np.arange(len(v)), np.cumsum(v) / np.arange(1, len(v) + 1))
    ax.set_xlabel("iteration")
    ax.set_ylabel(f"accumulated avg. {ylabel}")
    return _save(fig, path)


def plot_confusion(cm, class_names, path, title: str = "") -> Path:
    cm = np.asarray(cm)
    k = len(class_names)
    fig, ax = plt.subplots(figsize=(1 + 0.45 * k, 1 + 0.4 * k))
    ax.imshow(cm, cmap="Blues")
    ax.set_xticks(range(k), class_names, fontsize=7, rotation=45)
    ax.set_yticks(range(k), class_names, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if k <= 12:
        for i in range(k):
            for j in range(k):
                ax.text(j, i, int(cm[i, j]), ha="center", va="center", fontsize=6)
    if title:
        ax.set_title(title, fontsize=9)
    return _save(fig, path)


def plot_accuracy_bars(accuracies: dict[str, float], path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    names = list(accuracies)
    vals = [100 * accuracies[n] for n in names]
    ax.bar(range(len(names)), vals, color="tab:gray")
    ax.set_xticks(range(len(names)), names, fontsize=7, rotation=20)
    ax.set_ylabel("test accuracy (%)")
    lo = min(vals) if vals else 0
    ax.set_ylim(max(0, lo - 5), 100)
    if title:
        ax.set_title(title, fontsize=9)
    return _save(fig, path)
