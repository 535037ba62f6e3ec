"""Figure rendering for the CLI report paths.

Every report-producing command can drop a PNG next to its JSON/CSV
output. All plotting goes through the Agg backend so the toolkit works
headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_training_curves(history, path) -> Path:
    """Step losses plus per-epoch train/validation accuracy."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(history.step_losses, lw=0.8)
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.set_title("training loss")
    epochs = np.arange(1, len(history.epoch_train_acc) + 1)
    ax2.plot(epochs, history.epoch_train_acc, "o-", label="train")
    ax2.plot(epochs, history.epoch_val_acc, "s-", label="validation")
    if history.best_epoch >= 0:
        ax2.axvline(history.best_epoch + 1, color="gray", ls="--", lw=0.8)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("accuracy")
    ax2.set_ylim(0, 1.02)
    ax2.set_title("accuracy")
    ax2.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_probability_histogram(report, path) -> Path:
    """Per-class histogram of predicted stego probabilities."""
    cover = [r["probability"] for r in report.probabilities if r["label"] == "cover"]
    stego = [r["probability"] for r in report.probabilities if r["label"] == "stego"]
    fig, ax = plt.subplots(figsize=(6, 4))
    bins = np.linspace(0.0, 1.0, 41)
    ax.hist(cover, bins=bins, alpha=0.6, label="cover")
    ax.hist(stego, bins=bins, alpha=0.6, label="stego")
    ax.axvline(report.threshold, color="k", ls="--", lw=1, label="threshold")
    ax.set_xlabel("predicted stego probability")
    ax.set_ylabel("clips")
    ax.set_title(f"accuracy {report.accuracy:.4f} on {report.total} clips")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_latency_curve(report, path) -> Path:
    """Mean single-clip detection time vs clip length, with error bars."""
    lengths = [e.clip_len_frames for e in report.entries]
    means = [e.mean_ms for e in report.entries]
    sds = [e.sd_ms for e in report.entries]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(lengths, means, yerr=sds, fmt="o-", capsize=3)
    ax.set_xlabel("clip length (frames)")
    ax.set_ylabel("detection time (ms)")
    ax.set_title("single-clip inference latency")
    ax.set_xscale("log")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_ablation_chart(rows: list[dict], path) -> Path:
    """Test accuracy per architecture variant."""
    fig, ax = plt.subplots(figsize=(7, 4))
    names = [r["variant"] for r in rows]
    accs = [r["accuracy"] for r in rows]
    ax.bar(names, accs)
    ax.set_xlabel("variant")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1.02)
    for i, acc in enumerate(accs):
        ax.text(i, acc + 0.01, f"{acc:.3f}", ha="center", fontsize=8)
    ax.set_title("architecture variants")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
