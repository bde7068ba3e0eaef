"""Report figures written next to the CSV outputs (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def figure_path(csv_path, suffix: str = "") -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + suffix + ".png")


def _moving_average(values, window: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window or window <= 1:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def plot_losses(rows: list[dict], out_path, window: int = 50) -> Path:
    """One line per logged loss component, raw (faint) and smoothed."""
    keys = [k for k in ("ldm", "ca", "mask", "total") if rows and k in rows[0]]
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = np.array([r["step"] for r in rows])
    for key in keys:
        vals = np.array([r[key] for r in rows], dtype=np.float64)
        line, = ax.plot(steps, vals, alpha=0.25, linewidth=0.8)
        smooth = _moving_average(vals, window)
        ax.plot(steps[len(steps) - len(smooth):], smooth, color=line.get_color(), label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    if keys:
        ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return Path(out_path)


def plot_samples(conditioned: np.ndarray, unconditioned: np.ndarray, out_path, limit: int = 8) -> Path:
    """Two rows of images: conditioned samples above their empty-bundle counterparts."""
    n = min(limit, len(conditioned))
    fig, axes = plt.subplots(2, max(n, 1), figsize=(1.2 * max(n, 1), 2.6), squeeze=False)
    for row, imgs in enumerate((conditioned, unconditioned)):
        for col in range(axes.shape[1]):
            ax = axes[row, col]
            ax.axis("off")
            if col < n:
                ax.imshow(np.clip(np.transpose(imgs[col], (1, 2, 0)), 0, 1), interpolation="nearest")
    axes[0, 0].set_title("conditioned", fontsize=8, loc="left")
    axes[1, 0].set_title("empty bundle", fontsize=8, loc="left")
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return Path(out_path)


def plot_metrics(rows: list[dict], out_path) -> Path:
    """Mean seg-IoU and edge-SSIM, conditioned versus unconditioned."""
    metrics = ("seg_iou", "edge_ssim")
    cond = [np.mean([r[m] for r in rows]) for m in metrics]
    uncond = [np.mean([r[f"uncond_{m}"] for r in rows]) for m in metrics]
    x = np.arange(len(metrics))
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(x - 0.2, cond, 0.4, label="conditioned")
    ax.bar(x + 0.2, uncond, 0.4, label="unconditioned")
    ax.set_xticks(x, metrics)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return Path(out_path)


def plot_bench(rows: list[dict], out_path) -> Path:
    """Trainable parameters and memory per adaptation scheme, log scale."""
    names = [r["scheme"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    for ax, key in zip(axes, ("trainable_params", "memory_bytes")):
        ax.bar(names, [r[key] for r in rows])
        ax.set_yscale("log")
        ax.set_title(key)
        ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return Path(out_path)
