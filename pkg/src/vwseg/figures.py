"""Matplotlib figures rendered next to the delimited report files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curve(trace, path) -> None:
    """Per-episode loss with a short moving average."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    xs = np.arange(1, len(trace) + 1)
    ax.plot(xs, trace, lw=0.6, alpha=0.45, label="episode loss")
    win = max(1, len(trace) // 25)
    if win > 1:
        kernel = np.ones(win) / win
        smooth = np.convolve(trace, kernel, mode="valid")
        ax.plot(xs[win - 1:], smooth, lw=1.6, label=f"mean of {win}")
    ax.set_xlabel("episode")
    ax.set_ylabel("query cross-entropy")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_iou_curves(report, path) -> None:
    """Per-frame region overlap for every (video, object) pair."""
    fig, ax = plt.subplots(figsize=(6.5, 4))
    for r in report.objects:
        ax.plot(r.frames, r.per_frame_j, marker=".", lw=1.0,
                label=f"{r.video}/obj{r.class_id}")
    ax.set_xlabel("frame")
    ax.set_ylabel("region overlap (J)")
    ax.set_ylim(-0.02, 1.02)
    if len(report.objects) <= 12:
        ax.legend(frameon=False, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sweep(xs, series: dict, xlabel: str, path, xticks_as_labels=False) -> None:
    """One line per named series over a shared sweep axis."""
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    pos = np.arange(len(xs)) if xticks_as_labels else np.asarray(xs, dtype=float)
    for name, ys in series.items():
        ax.plot(pos, ys, marker="o", lw=1.2, label=name)
    if xticks_as_labels:
        ax.set_xticks(np.arange(len(xs)))
        ax.set_xticklabels([str(x) for x in xs])
    ax.set_xlabel(xlabel)
    ax.set_ylabel("score")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
