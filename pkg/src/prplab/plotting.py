"""Report figures written next to the delimited outputs of each command."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

REPORT_RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 110,
    "savefig.bbox": "tight",
}


def fig_size(width: float = 5.0, ratio: float | None = None) -> tuple[float, float]:
    ratio = ratio if ratio is not None else (math.sqrt(5) - 1) / 2
    return width, width * ratio


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training_log(history: Sequence[dict], path) -> Path:
    """Train/val loss on the left axis, rate accuracy on the right."""
    with plt.rc_context(REPORT_RC):
        fig, ax = plt.subplots(figsize=fig_size())
        epochs = [e["epoch"] for e in history]
        ax.plot(epochs, [e["train_loss"] for e in history], label="train loss", color="tab:blue")
        ax.plot(epochs, [e["val_loss"] for e in history], label="val loss", color="tab:orange")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        acc = [e.get("dp_accuracy") for e in history]
        if any(a is not None for a in acc):
            ax2 = ax.twinx()
            ax2.plot(epochs, acc, color="tab:green", ls="--", label="val rate acc.")
            ax2.set_ylim(0, 1.02)
            ax2.set_ylabel("rate accuracy")
            ax2.spines["top"].set_visible(False)
            lines = ax.get_lines() + ax2.get_lines()
        else:
            lines = ax.get_lines()
        ax.legend(lines, [ln.get_label() for ln in lines], loc="upper right", frameon=False)
        return _save(fig, path)


def plot_topk(topk: dict[str, float], path, title: str = "retrieval") -> Path:
    with plt.rc_context(REPORT_RC):
        fig, ax = plt.subplots(figsize=fig_size(4.0))
        keys = list(topk)
        ax.bar(keys, [100 * topk[k] for k in keys], color="0.4")
        ax.set_ylim(0, 100)
        ax.set_ylabel("accuracy (%)")
        ax.set_title(title)
        return _save(fig, path)


def plot_finetune_history(histories: dict[str, Sequence[dict]], path, key: str = "eval_video_accuracy") -> Path:
    with plt.rc_context(REPORT_RC):
        fig, ax = plt.subplots(figsize=fig_size())
        for name, hist in histories.items():
            ax.plot([e["epoch"] for e in hist], [e.get(key, np.nan) for e in hist], marker=".", label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel(key.replace("_", " "))
        ax.set_ylim(0, 1.02)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_ablation(rows: Sequence[dict], path) -> Path:
    with plt.rc_context(REPORT_RC):
        fig, ax = plt.subplots(figsize=fig_size(6.0))
        labels = [f"{r['method']} {r['sampling_interval']}\n{r['reconstructing_rate']}" for r in rows]
        ax.bar(range(len(rows)), [100 * r["downstream_accuracy"] for r in rows], color="0.4")
        ax.set_xticks(range(len(rows)), labels, rotation=30, ha="right")
        ax.set_ylabel("desk action accuracy (%)")
        return _save(fig, path)


def attention_panel(frames: Sequence[np.ndarray], attention: Sequence[np.ndarray],
                    activation: Sequence[np.ndarray], path) -> Path:
    """Rows: input frame, motion attention, conv5 activation; one column per selected frame."""
    n = len(frames)
    with plt.rc_context(REPORT_RC):
        fig, axes = plt.subplots(3, n, figsize=(1.6 * n, 5.0), squeeze=False)
        for j in range(n):
            axes[0, j].imshow(frames[j])
            axes[1, j].imshow(attention[j], cmap="gray", vmin=0, vmax=255)
            axes[2, j].imshow(activation[j], cmap="jet", vmin=0, vmax=255)
            for i in range(3):
                axes[i, j].set_axis_off()
        for i, name in enumerate(("frame", "motion attention", "conv5 activation")):
            axes[i, 0].set_title(name, loc="left", fontsize=8)
        return _save(fig, path)
