"""Figures written next to the text reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_report(report, path, title=None):
    """Mean PSNR/SSIM per kernel id."""
    per_k = report.per_kernel()
    labels = list(per_k)
    psnr = [per_k[k][0] for k in labels]
    ssim = [per_k[k][1] for k in labels]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.5 * len(labels) + 2), 3.0))
        x = np.arange(len(labels))
        ax.plot(x, psnr, "o-", color="C0")
        ax.set_ylabel("PSNR (dB)", color="C0")
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=45, ha="right")
        ax2 = ax.twinx()
        ax2.plot(x, ssim, "s--", color="C1")
        ax2.set_ylabel("SSIM", color="C1")
        ax2.spines["right"].set_visible(True)
        ax.set_title(title or f"{report.meta.get('protocol', '')} x{report.meta.get('scale', '')}: "
                              f"{report.mean_psnr:.2f} dB / {report.mean_ssim:.4f}")
        _save(fig, path)


def plot_detail_curve(widths, psnrs, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        ax.plot(widths, psnrs, "o-")
        ax.set_xlabel("kernel width")
        ax.set_ylabel("detail PSNR (dB)")
        _save(fig, path)


def plot_loss_log(rows, path):
    """``rows`` as returned by ``training.read_loss_log``."""
    rows = np.asarray(rows)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        if len(rows):
            for col, name in ((1, "total"), (2, "structure"), (3, "detail"), (4, "SR")):
                if np.all(np.isnan(rows[:, col])):
                    continue
                ax.plot(rows[:, 0], rows[:, col], label=name, lw=1)
            ax.set_yscale("log")
            ax.legend(frameon=False)
        ax.set_xlabel("iteration")
        ax.set_ylabel("L1 loss")
        _save(fig, path)


def plot_components(panels: dict, path, ncols=3):
    """Grid of named images, each HxWx3 in [0, 1]."""
    names = list(panels)
    nrows = int(np.ceil(len(names) / ncols))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(nrows, ncols, figsize=(3.0 * ncols, 3.0 * nrows), squeeze=False)
        for ax in axes.ravel():
            ax.axis("off")
        for ax, name in zip(axes.ravel(), names):
            img = np.clip(np.asarray(panels[name]), 0, 1)
            ax.imshow(img[..., 0] if img.shape[-1] == 1 else img,
                      cmap="gray" if img.shape[-1] == 1 else None, interpolation="nearest")
            ax.set_title(name)
        _save(fig, path)
