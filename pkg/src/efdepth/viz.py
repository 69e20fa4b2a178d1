"""Figure rendering: depth-map dumps and loss curves (headless Agg backend)."""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DEPTH_CMAP = "magma"


def save_depth_image(path, depth_m: np.ndarray, d_max: float) -> None:
    """PNG dump of a metric depth map on the fixed range [0, d_max].

    The fixed colormap/range keeps dumps visually comparable across runs.
    """
    arr = np.clip(np.asarray(depth_m, dtype=np.float64) / float(d_max), 0.0, 1.0)
    plt.imsave(path, arr, cmap=DEPTH_CMAP, vmin=0.0, vmax=1.0)


def save_depth_pair(path, pred_m: np.ndarray, gt_m: np.ndarray, d_max: float, title="") -> None:
    """Side-by-side prediction / ground-truth figure on a shared scale."""
    fig, axes = plt.subplots(1, 2, figsize=(7.2, 3.2))
    for ax, img, name in zip(axes, (pred_m, gt_m), ("prediction", "ground truth")):
        shown = ax.imshow(
            np.asarray(img, dtype=np.float64), cmap=DEPTH_CMAP, vmin=0.0, vmax=float(d_max)
        )
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    fig.colorbar(shown, ax=axes, fraction=0.03, label="depth [m]")
    if title:
        fig.suptitle(title, fontsize=10)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)


def save_loss_curve(path, csv_path) -> None:
    """Render the training loss CSV (step, mse, grad, total) to a figure."""
    steps, mse, grad, total = [], [], [], []
    with open(csv_path, "r", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            mse.append(float(row["mse"]))
            grad.append(float(row["grad"]))
            total.append(float(row["total"]))
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    ax.plot(steps, total, label="total", lw=1.4)
    ax.plot(steps, mse, label="mse", lw=0.9, alpha=0.8)
    ax.plot(steps, grad, label="gradient", lw=0.9, alpha=0.8)
    if total and all(v > 0 for v in total):
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
