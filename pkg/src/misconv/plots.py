"""Matplotlib figures rendered next to the delimited reports.

Every figure writer takes data plus an output path and saves a PNG; nothing
here opens a window (Agg backend).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_em_curve(report, path) -> None:
    """Mean log-likelihood per EM iteration."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(len(report.loglik)), report.loglik, marker="o", markersize=3)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean log-likelihood")
    ax.set_title("EM convergence")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_accuracy_bars(arm_accuracies: dict, path) -> None:
    """Test accuracy per experiment arm."""
    fig, ax = plt.subplots(figsize=(6, 4))
    arms = list(arm_accuracies)
    values = [arm_accuracies[a] for a in arms]
    ax.bar(arms, values, color="#4878d0")
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.3f}", ha="center", va="bottom", fontsize=9)
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1.05)
    ax.set_title("classification accuracy by arm")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_imputation_grid(originals, masked_images, imputations, hw, path,
                         n_show=8) -> None:
    """Rows: ground truth, masked input (missing in red), imputation."""
    n = min(n_show, len(originals))
    fig, axes = plt.subplots(3, n, figsize=(1.3 * n, 4.2))
    if n == 1:
        axes = axes[:, None]
    for col in range(n):
        truth = np.asarray(originals[col]).reshape(hw)
        img = masked_images[col]
        shown = np.asarray(img.pixels).reshape(hw)
        miss = (~img.observed).reshape(hw)
        rgb = np.stack([shown, shown, shown], axis=-1)
        rgb[miss] = (0.85, 0.2, 0.2)
        imputed = np.asarray(imputations[col]).reshape(hw)
        for row, panel in enumerate((truth, rgb, imputed)):
            ax = axes[row, col]
            ax.imshow(np.clip(panel, 0, 1), cmap=None if row == 1 else "gray",
                      vmin=0, vmax=1)
            ax.set_xticks(())
            ax.set_yticks(())
    for row, label in enumerate(("truth", "masked", "imputed")):
        axes[row, 0].set_ylabel(label, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_latency_chart(rows, path) -> None:
    """Median forward latency per grid cell, classic vs expected-activation."""
    cells = sorted({(r.input_size, r.batch) for r in rows})
    labels = [f"{s}px\nB{b}" for s, b in cells]
    med = {(r.input_size, r.batch, r.layer): r.median_s for r in rows}
    iqr = {(r.input_size, r.batch, r.layer): r.iqr_s for r in rows}
    x = np.arange(len(cells))
    width = 0.38
    fig, ax = plt.subplots(figsize=(1.1 * len(cells) + 2, 4))
    for off, layer, color in ((-width / 2, "classic", "#4878d0"),
                              (width / 2, "misconv", "#d65f5f")):
        vals = [med[(s, b, layer)] for s, b in cells]
        errs = [iqr[(s, b, layer)] for s, b in cells]
        ax.bar(x + off, vals, width, yerr=errs, capsize=2, label=layer, color=color)
    ax.set_xticks(x, labels)
    ax.set_ylabel("median forward time [s]")
    ax.set_yscale("log")
    ax.legend()
    ax.set_title("forward-pass latency")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_z_histogram(reports, path) -> None:
    """Pooled z-score histogram across oracle reports, with the 4/5 thresholds."""
    z = np.concatenate([r.z for r in reports])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(z, bins=60, color="#4878d0")
    for thr, style in ((4.0, "--"), (5.0, "-")):
        ax.axvline(thr, color="#d65f5f", linestyle=style, label=f"z = {thr:g}")
    ax.set_xlabel("|analytic - empirical| / SE")
    ax.set_ylabel("coordinates")
    ax.set_yscale("log")
    ax.legend()
    ax.set_title("Monte-Carlo agreement")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
