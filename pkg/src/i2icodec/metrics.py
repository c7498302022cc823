"""Image quality and translation metrics."""
from __future__ import annotations

import itertools
import math

import numpy as np
from scipy import ndimage

from .autodiff.tensor import ShapeError

PSNR_CAP = 100.0
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
MIN_SCALE_SIZE = 16


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"images differ in shape: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, x_hat) -> float:
    """10 log10(1 / MSE) for images in [0, 1], capped at 100 dB."""
    x, x_hat = _pair(x, x_hat)
    mse = float(np.mean((x - x_hat) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def msssim_scales(size: int) -> int:
    """Scales whose coarsest level is still at least 16 pixels, at most 5."""
    n = 1
    while n < len(MSSSIM_WEIGHTS) and size // 2 ** n >= MIN_SCALE_SIZE:
        n += 1
    return n


def _blur_valid(a: np.ndarray) -> np.ndarray:
    half = SSIM_WINDOW // 2
    out = ndimage.gaussian_filter(a, sigma=(0, SSIM_SIGMA, SSIM_SIGMA), truncate=half / SSIM_SIGMA,
                                  mode="constant")
    return out[:, half:-half, half:-half]


def _ssim_terms(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mx, my = _blur_valid(x), _blur_valid(y)
    sxx = _blur_valid(x * x) - mx * mx
    syy = _blur_valid(y * y) - my * my
    sxy = _blur_valid(x * y) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def _pool(a: np.ndarray) -> np.ndarray:
    c, h, w = a.shape
    return a[:, :h - h % 2, :w - w % 2].reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def msssim(x, x_hat) -> float:
    """Multi-scale SSIM of two (C, H, W) images in [0, 1]; the scale count adapts to size."""
    x, y = _pair(x, x_hat)
    if x.ndim == 2:
        x, y = x[None], y[None]
    if x.ndim != 3:
        raise ShapeError(f"expected (C, H, W) images, got {x.shape}")
    size = min(x.shape[1:])
    if size < SSIM_WINDOW:
        raise ShapeError(f"images smaller than the {SSIM_WINDOW}-pixel window")
    n = msssim_scales(size)
    weights = np.asarray(MSSSIM_WEIGHTS[:n])
    weights = weights / weights.sum()
    value = 1.0
    for j in range(n):
        ssim, cs = _ssim_terms(x, y)
        term = ssim if j == n - 1 else cs
        value *= max(term, 0.0) ** weights[j]
        x, y = _pool(x), _pool(y)
    return float(value)


def diversity_score(translations) -> float:
    """Mean over unordered pairs of the mean absolute difference."""
    imgs = [np.asarray(t, dtype=np.float64) for t in translations]
    if len(imgs) < 2:
        raise ValueError("diversity needs at least two translations")
    dists = [float(np.mean(np.abs(a - b))) for a, b in itertools.combinations(imgs, 2)]
    return float(np.mean(dists))


def bpp(n_bytes: int, width: int, height: int) -> float:
    return 8.0 * n_bytes / (width * height)
