"""Report figures rendered alongside the delimited outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_trajectory_figure(path, est_positions, gt_positions=None) -> None:
    """Top-down (x, y) view of the estimated vs ground-truth path."""
    est = np.asarray(est_positions)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(est[:, 0], est[:, 1], "o-", color="tab:blue", label="estimated", ms=3)
    if gt_positions is not None:
        gt = np.asarray(gt_positions)
        ax.plot(gt[:, 0], gt[:, 1], "x--", color="black", label="ground truth", ms=4)
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best", fontsize=8)
    ax.set_title("trajectory (top view)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_per_frame_figure(path, series: dict[str, np.ndarray], ylabel: str,
                          title: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for name, values in series.items():
        ax.plot(np.arange(len(values)), values, marker="o", ms=3, label=name)
    ax.set_xlabel("frame pair" if "rpe" in title.lower() else "frame")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(series) > 1:
        ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_run_summary_figure(path, log: list[dict]) -> None:
    """Solver inliers, correspondence counts, and map size over the run."""
    frames = [rec["frame"] for rec in log]
    fig, axes = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    axes[0].plot(frames, [rec["n_correspondences"] for rec in log],
                 "o-", ms=3, label="correspondences")
    axes[0].plot(frames, [rec["inliers"] for rec in log], "s-", ms=3,
                 label="solver inliers")
    axes[0].set_ylabel("count")
    axes[0].legend(fontsize=8)
    axes[0].grid(alpha=0.3)
    axes[1].plot(frames, [rec["n_surfels"] for rec in log], "o-", ms=3,
                 color="tab:green")
    axes[1].set_ylabel("surfels")
    axes[1].set_xlabel("frame")
    axes[1].grid(alpha=0.3)
    fig.suptitle("run summary")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_render_metrics_figure(path, indices, psnr, ssim) -> None:
    fig, ax1 = plt.subplots(figsize=(6, 3.2))
    finite = [p if np.isfinite(p) else np.nan for p in psnr]
    ax1.bar(indices, finite, color="tab:blue", alpha=0.7, label="PSNR")
    ax1.set_xlabel("held-out frame")
    ax1.set_ylabel("PSNR [dB]", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(indices, ssim, "o-", color="tab:red", label="SSIM")
    ax2.set_ylabel("SSIM", color="tab:red")
    ax2.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
