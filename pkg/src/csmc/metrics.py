"""PSNR and SSIM for frames with pixel range [0, 1]."""

import numpy as np

from .errors import DimensionError

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"frame shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """10 log10(1 / MSE), capped at 99 dB for MSE < 1e-10."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return g


def _filter_valid(img, g):
    """Separable weighted sum over every full window (no padding)."""
    n = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=1) @ g


def ssim_map(a, b, data_range=1.0):
    a, b = _pair(a, b)
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise DimensionError(f"SSIM needs a 2-D frame of at least {SSIM_WINDOW}x{SSIM_WINDOW}, "
                             f"got {a.shape}")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b):
    """Mean SSIM over all full 11x11 Gaussian (sigma 1.5) windows."""
    return float(np.mean(ssim_map(a, b)))


def video_metrics(reference, test):
    """Per-frame and mean PSNR/SSIM for two sequences of frames."""
    if len(reference) != len(test):
        raise DimensionError(f"frame counts differ: {len(reference)} vs {len(test)}")
    rows = [{"frame": i, "psnr": psnr(r, t), "ssim": ssim(r, t)}
            for i, (r, t) in enumerate(zip(reference, test))]
    return {
        "frames": rows,
        "mean_psnr": float(np.mean([r["psnr"] for r in rows])) if rows else float("nan"),
        "mean_ssim": float(np.mean([r["ssim"] for r in rows])) if rows else float("nan"),
    }
