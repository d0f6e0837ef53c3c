"""Report figures, written next to the CSV outputs (Agg backend, no display)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps repeated runs byte-stable
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curve(curve: Sequence[dict], path, title: str = "loss") -> Path:
    steps = [c["step"] for c in curve]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.semilogy(steps, [max(c["total"], 1e-300) for c in curve], label="total")
    if any(c.get("lang") for c in curve):
        ax.plot(steps, [abs(c["lang"]) for c in curve], label="|lang|", alpha=0.7)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_trajectories(pred: np.ndarray, gt: np.ndarray | None, path, title: str = "camera positions") -> Path:
    """Top-down (x, z) view of predicted and, if given, ground-truth positions."""
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.plot(pred[:, 0], pred[:, 2], "o-", label="predicted", ms=3)
    if gt is not None:
        ax.plot(gt[:, 0], gt[:, 2], "s--", label="ground truth", ms=3)
    ax.set_xlabel("x")
    ax.set_ylabel("z")
    ax.set_title(title)
    ax.axis("equal")
    ax.legend()
    return _save(fig, path)


def plot_stream_report(reports: Sequence[dict], path) -> Path:
    """Per-frame primitive count, merges and recurrent-state size."""
    frames = [r["frame"] for r in reports]
    fig, (a0, a1) = plt.subplots(1, 2, figsize=(8, 3.2))
    a0.plot(frames, [r["primitives"] for r in reports], label="primitives")
    a0.plot(frames, [r["merges"] for r in reports], label="merges")
    a0.set_xlabel("frame")
    a0.legend()
    a1.plot(frames, [r["state_bytes"] / 1024 for r in reports], "o-", ms=3)
    a1.set_xlabel("frame")
    a1.set_ylabel("state size (KiB)")
    a1.set_ylim(bottom=0)
    return _save(fig, path)


def plot_metric_bars(labels: Sequence[str], values: Sequence[float], path, ylabel: str) -> Path:
    fig, ax = plt.subplots(figsize=(max(3.0, 0.6 * len(labels) + 1.5), 3))
    ax.bar(range(len(values)), values)
    ax.set_xticks(range(len(values)))
    ax.set_xticklabels(labels, rotation=45, ha="right")
    ax.set_ylabel(ylabel)
    return _save(fig, path)


def save_png(img: np.ndarray, path) -> Path:
    plt.imsave(Path(path), np.clip(np.asarray(img, dtype=np.float64), 0, 1))
    return Path(path)
