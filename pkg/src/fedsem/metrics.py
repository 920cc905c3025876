"""Image quality and task metrics.

Images are float arrays scaled to [0, 1]; dynamic range is fixed at 1.
"""

import warnings

import numpy as np
from scipy.signal import convolve2d

PSNR_CAP_DB = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def mse(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a, b):
    """Peak signal-to-noise ratio in dB, capped at 100 for identical images."""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP_DB
    return min(-10.0 * np.log10(err), PSNR_CAP_DB)


def constant_mean_psnr(reference):
    """PSNR of the flat predictor that outputs the image's own mean value."""
    reference = np.asarray(reference, dtype=np.float64)
    return psnr(reference, np.full_like(reference, reference.mean()))


def _gaussian_kernel(size, sigma):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_plane(a, b, kernel, c1, c2):
    mu_a = convolve2d(a, kernel, mode="valid")
    mu_b = convolve2d(b, kernel, mode="valid")
    var_a = convolve2d(a * a, kernel, mode="valid") - mu_a ** 2
    var_b = convolve2d(b * b, kernel, mode="valid") - mu_b ** 2
    cov = convolve2d(a * b, kernel, mode="valid") - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b):
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Accepts (H, W) or (H, W, C) arrays in [0, 1]; channels are averaged.
    Images smaller than the window fall back to the global-statistics
    form of the index and emit a warning.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.ndim != 3:
        raise ValueError(f"expected 2-d or 3-d image, got ndim={a.ndim}")
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    h, w, channels = a.shape
    if min(h, w) < SSIM_WINDOW:
        warnings.warn("image smaller than the 11x11 window; "
                      "using global-statistics similarity", stacklevel=2)
        scores = []
        for ch in range(channels):
            pa, pb = a[:, :, ch], b[:, :, ch]
            mu_a, mu_b = pa.mean(), pb.mean()
            var_a, var_b = pa.var(), pb.var()
            cov = ((pa - mu_a) * (pb - mu_b)).mean()
            num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
            den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
            scores.append(num / den)
        return float(np.mean(scores))
    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    return float(np.mean([
        _ssim_plane(a[:, :, ch], b[:, :, ch], kernel, c1, c2)
        for ch in range(channels)
    ]))


def accuracy(predicted, target):
    predicted = np.asarray(predicted)
    target = np.asarray(target)
    if predicted.shape != target.shape:
        raise ValueError(f"shape mismatch: {predicted.shape} vs {target.shape}")
    if predicted.size == 0:
        raise ValueError("empty label arrays")
    return float(np.mean(predicted == target))
