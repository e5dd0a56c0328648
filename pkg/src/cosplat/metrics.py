"""Image quality metrics: PSNR, windowed SSIM (with analytic gradient for the
training loss), and depth-error metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d, correlate2d

PSNR_CAP = 99.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB on [0, 1] images, capped at 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images must share a shape")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _ssim_window(h: int, w: int) -> np.ndarray:
    """Normalized Gaussian window; shrinks to the image when it is smaller
    than 11x11, so tiny images are scored as a single window."""
    wh = min(SSIM_WINDOW, h)
    ww = min(SSIM_WINDOW, w)

    def gauss(n):
        x = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
        g = np.exp(-(x**2) / (2.0 * SSIM_SIGMA**2))
        return g

    win = np.outer(gauss(wh), gauss(ww))
    return win / win.sum()


def _ssim_channel(x: np.ndarray, y: np.ndarray, win: np.ndarray, with_grad: bool):
    mu_x = correlate2d(x, win, mode="valid")
    mu_y = correlate2d(y, win, mode="valid")
    mx2 = correlate2d(x * x, win, mode="valid")
    my2 = correlate2d(y * y, win, mode="valid")
    mxy = correlate2d(x * y, win, mode="valid")
    sx2 = mx2 - mu_x**2
    sy2 = my2 - mu_y**2
    sxy = mxy - mu_x * mu_y

    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * sxy + SSIM_C2
    b1 = mu_x**2 + mu_y**2 + SSIM_C1
    b2 = sx2 + sy2 + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    mean_s = float(s.mean())
    if not with_grad:
        return mean_s, None

    npix = s.size
    inv = 1.0 / (b1 * b2)
    # partials of S wrt mu_x, m_x2 = win*x^2 and m_xy = win*(xy)
    d_mu = inv * (2.0 * mu_y * a2 - 2.0 * mu_y * a1) + s * (
        -2.0 * mu_x / b1 + 2.0 * mu_x / b2
    )
    d_mx2 = -s / b2
    d_mxy = 2.0 * a1 * inv
    grad = (
        convolve2d(d_mu, win, mode="full")
        + 2.0 * x * convolve2d(d_mx2, win, mode="full")
        + y * convolve2d(d_mxy, win, mode="full")
    ) / npix
    return mean_s, grad


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean windowed SSIM over channels (11x11 Gaussian window, sigma 1.5)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images must share a shape")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    win = _ssim_window(a.shape[0], a.shape[1])
    vals = [_ssim_channel(a[..., c], b[..., c], win, False)[0] for c in range(a.shape[2])]
    return float(np.mean(vals))


def ssim_with_grad(a: np.ndarray, b: np.ndarray):
    """SSIM value plus d(SSIM)/da, channel-averaged (b treated as constant)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[..., None]
        b = b[..., None]
    win = _ssim_window(a.shape[0], a.shape[1])
    vals = []
    grad = np.zeros_like(a)
    nch = a.shape[2]
    for c in range(nch):
        v, g = _ssim_channel(a[..., c], b[..., c], win, True)
        vals.append(v)
        grad[..., c] = g / nch
    value = float(np.mean(vals))
    return value, (grad[..., 0] if squeeze else grad)


@dataclass
class DepthMetrics:
    absrel: float
    rmse: float
    mae: float
    log10: float
    log10_excluded_fraction: float


def depth_metrics(pred: np.ndarray, ref: np.ndarray, valid_mask: np.ndarray) -> DepthMetrics:
    """AbsRel, RMSE, MAE and Log10 depth errors over a valid-pixel mask.

    Pixels with non-positive predictions are excluded from the Log10 term and
    reported via ``log10_excluded_fraction``.

    Raises:
        ValueError: if the valid mask is empty (result undefined).
    """
    valid_mask = np.asarray(valid_mask, dtype=bool)
    if not valid_mask.any():
        raise ValueError("depth metrics undefined: empty valid mask")
    p = np.asarray(pred, dtype=np.float64)[valid_mask]
    r = np.asarray(ref, dtype=np.float64)[valid_mask]
    if np.any(r <= 0.0):
        raise ValueError("reference depth must be positive on the valid mask")
    diff = p - r
    pos = p > 0.0
    if pos.any():
        log10 = float(np.mean(np.abs(np.log10(p[pos]) - np.log10(r[pos]))))
    else:
        log10 = float("nan")
    return DepthMetrics(
        absrel=float(np.mean(np.abs(diff) / r)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        mae=float(np.mean(np.abs(diff))),
        log10=log10,
        log10_excluded_fraction=float(1.0 - pos.mean()),
    )
