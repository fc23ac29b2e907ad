"""Figures written next to the JSON reports.

Every function takes report data, writes one PNG and returns its path.
The Agg backend is forced so this works headless.
"""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.dpi": 100,
}


def figure_path(report_path, suffix=""):
    """``out/report.json`` -> ``out/report{suffix}.png``."""
    stem, _ = os.path.splitext(report_path)
    return f"{stem}{suffix}.png"


def _size(scale=1.0):
    width = 6.0 * scale
    return width, width * (np.sqrt(5.0) - 1.0) / 2.0


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_frame_metrics(report, path):
    """PSNR and SSIM per frame from an eval report."""
    rows = report["frames"]
    frames = [r["frame"] for r in rows]
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=_size())
        ax1.plot(frames, [r["psnr"] for r in rows], "o-", color="C0")
        ax1.axhline(report["mean_psnr"], ls="--", color="C0", lw=0.8)
        ax1.set_ylabel("PSNR (dB)")
        ax2.plot(frames, [r["ssim"] for r in rows], "s-", color="C1")
        ax2.axhline(report["mean_ssim"], ls="--", color="C1", lw=0.8)
        ax2.set_ylabel("SSIM")
        ax2.set_xlabel("frame")
        return _save(fig, path)


def plot_loss_curve(history, path):
    epochs = [h["epoch"] for h in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=_size())
        for key, style in (("total", "-"), ("L_err", "--"), ("L_mc", ":")):
            vals = [h[key] for h in history]
            if any(v > 0 for v in vals):
                ax.semilogy(epochs, vals, style, label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
        return _save(fig, path)


def plot_stage_ablation(report, path):
    rows = report["rows"]
    stages = [r["stages"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax1 = plt.subplots(figsize=_size())
        ax1.plot(stages, [r["psnr"] for r in rows], "o-", color="C0", label="PSNR")
        ax1.set_xlabel("stages")
        ax1.set_ylabel("PSNR (dB)", color="C0")
        ax1.set_xticks(stages)
        ax2 = ax1.twinx()
        ax2.plot(stages, [r["ssim"] for r in rows], "s--", color="C1", label="SSIM")
        ax2.set_ylabel("SSIM", color="C1")
        ax2.grid(False)
        ax1.set_title(f"CR {rows[0]['cr']}" if rows else "")
        return _save(fig, path)


def plot_noise_sweep(report, path):
    rows = report["rows"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=_size())
        ax.plot([r["snr_db"] for r in rows], [r["psnr"] for r in rows], "o-", label="noisy")
        if report.get("noiseless_psnr") is not None:
            ax.axhline(report["noiseless_psnr"], ls="--", color="k", lw=0.8, label="noiseless")
        ax.set_xlabel("measurement SNR (dB)")
        ax.set_ylabel("mean PSNR (dB)")
        ax.legend()
        return _save(fig, path)
