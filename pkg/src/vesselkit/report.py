"""Matplotlib figure rendering for CLI reports.

Every renderer writes a PNG next to the machine-readable artifact it
illustrates. Import stays local to this module so headless use of the
library never touches a GUI backend.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .cluster import ClusterAssignment, DistanceMatrix
from .volume import BinaryMask, Volume


def save_history_figure(history, path) -> None:
    """Loss and learning-rate curves (plus validation DSC when present)."""
    records = [h.to_dict() if hasattr(h, "to_dict") else dict(h) for h in history]
    epochs = [r["epoch"] for r in records]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, [r["mean_loss"] for r in records], "-o", ms=3, color="tab:blue", label="mean loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r["lr"] for r in records], "-", color="tab:orange", alpha=0.7, label="lr")
    ax2.set_ylabel("learning rate", color="tab:orange")
    if any("val_dsc" in r for r in records):
        ax3 = ax.twinx()
        ax3.spines.right.set_position(("outward", 45))
        ax3.plot(epochs, [r.get("val_dsc") for r in records], "-s", ms=3, color="tab:green")
        ax3.set_ylabel("val DSC", color="tab:green")
        ax3.set_ylim(0, 1)
    ax.set_title("training history")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_distance_matrix_figure(dm: DistanceMatrix, assignment: ClusterAssignment | None, path) -> None:
    """Heatmap of the distance matrix, raw and reordered by cluster label."""
    n_panels = 2 if assignment is not None else 1
    fig, axes = plt.subplots(1, n_panels, figsize=(5 * n_panels, 4.2), squeeze=False)
    im = axes[0, 0].imshow(dm.values, cmap="viridis")
    axes[0, 0].set_title("distance matrix")
    fig.colorbar(im, ax=axes[0, 0], fraction=0.046)
    if assignment is not None:
        order = np.argsort(np.asarray(assignment.labels), kind="stable")
        reordered = dm.values[np.ix_(order, order)]
        im2 = axes[0, 1].imshow(reordered, cmap="viridis")
        axes[0, 1].set_title(f"reordered by cluster (k={assignment.k})")
        fig.colorbar(im2, ax=axes[0, 1], fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_histograms_figure(histograms, labels, path) -> None:
    """Overlay of the normalized intensity histograms."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for h, label in zip(histograms, labels):
        centers = 0.5 * (h.bin_edges[:-1] + h.bin_edges[1:])
        ax.plot(centers, h.frequencies, lw=1, label=str(label))
    ax.set_xlabel("intensity")
    ax.set_ylabel("frequency")
    ax.set_title("intensity histograms (positive voxels)")
    if len(labels) <= 12:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_slice_figure(volume: Volume, overlays: dict, path) -> None:
    """Mid-axial slice of the input plus each overlay (probability or mask)."""
    nz = volume.dims[2]
    base = volume.as3d()[:, :, nz // 2].T
    panels = [("input", base, "gray", None)]
    for name, item in overlays.items():
        arr = item.as3d()[:, :, nz // 2].T
        if isinstance(item, BinaryMask):
            panels.append((name, arr, "magma", (0, 1)))
        else:
            panels.append((name, arr, "magma", None))
    fig, axes = plt.subplots(1, len(panels), figsize=(3.4 * len(panels), 3.6), squeeze=False)
    for ax, (name, arr, cmap, clim) in zip(axes[0], panels):
        im = ax.imshow(arr, cmap=cmap, origin="lower")
        if clim:
            im.set_clim(*clim)
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metrics_figure(report, path) -> None:
    """Bar chart of the defined rate metrics."""
    pairs = [
        (name, getattr(report, name))
        for name in ("dsc", "sensitivity", "specificity", "accuracy", "precision")
        if getattr(report, name) is not None
    ]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = [p[0] for p in pairs]
    vals = [p[1] for p in pairs]
    ax.bar(names, vals, color="tab:blue")
    ax.set_ylim(0, 1.05)
    for i, v in enumerate(vals):
        ax.text(i, v + 0.01, f"{v:.3f}", ha="center", fontsize=8)
    title = "segmentation metrics"
    if report.ahd is not None:
        title += f"  (AHD = {report.ahd:.2f} {report.ahd_units})"
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
