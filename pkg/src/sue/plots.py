"""Figure rendering for the report paths: every CLI report that writes a
CSV also drops a PNG next to it."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_histogram_pair(samples_a, samples_b, labels, title: str, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    bins = np.histogram_bin_edges(np.concatenate([samples_a, samples_b]), bins=40)
    ax.hist(samples_a, bins=bins, alpha=0.6, label=labels[0], color="tab:blue")
    ax.hist(samples_b, bins=bins, alpha=0.6, label=labels[1], color="tab:red")
    ax.set_xlabel("distance")
    ax.set_ylabel("count")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_loss_curves(history, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [r.epoch for r in history]
    train = [r.train_loss for r in history]
    val = [r.val_loss for r in history]
    if any(np.isfinite(v) for v in train):
        ax.plot(epochs, train, label="train")
    if any(np.isfinite(v) for v in val):
        ax.plot(epochs, val, label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title("training history")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_sweep_curve(points, x_key: str, y_key: str, path, title: str | None = None) -> None:
    """Scatter of per-point values with a median line per x position."""
    xs = np.array([p[x_key] for p in points], dtype=float)
    ys = np.array([p[y_key] for p in points], dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(xs, ys, alpha=0.5, s=18, label="runs")
    med_x = np.unique(xs)
    med_y = [np.median(ys[xs == v]) for v in med_x]
    ax.plot(med_x, med_y, marker="o", color="tab:red", label="median")
    ax.set_xlabel(x_key)
    ax.set_ylabel(y_key)
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
