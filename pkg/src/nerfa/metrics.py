"""Image quality metrics with unit peak value."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rays import DomainError

K1, K2 = 0.01, 0.03


def psnr(img: np.ndarray, ref: np.ndarray) -> float:
    """``-10 log10(MSE)``; ``inf`` for identical images."""
    img, ref = np.asarray(img, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise DomainError(f"shape mismatch {img.shape} vs {ref.shape}")
    mse = float(np.mean((img - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def mse_to_psnr(mse: float) -> float:
    return math.inf if mse == 0 else -10.0 * math.log10(mse)


def gaussian_window(size: int, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def window_size_for(shape: tuple) -> int:
    return 11 if min(shape[:2]) >= 11 else 7


def _local_mean(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    patches = sliding_window_view(x, w.shape)
    return np.einsum("ijkl,kl->ij", patches, w)


def ssim(img: np.ndarray, ref: np.ndarray, window: int = 0) -> float:
    """Mean SSIM over all fully-contained Gaussian windows of the grayscale images.

    Color images are reduced to grayscale by the channel mean. The window is
    11x11 (sigma 1.5) when both sides are at least 11 pixels, else 7x7.
    """
    img, ref = np.asarray(img, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise DomainError(f"shape mismatch {img.shape} vs {ref.shape}")
    if img.ndim == 3:
        img, ref = img.mean(axis=2), ref.mean(axis=2)
    size = window or window_size_for(img.shape)
    if min(img.shape) < size:
        raise DomainError(f"image {img.shape} smaller than {size}x{size} window")
    w = gaussian_window(size)
    c1, c2 = K1**2, K2**2
    mu1, mu2 = _local_mean(img, w), _local_mean(ref, w)
    s11 = _local_mean(img * img, w) - mu1 * mu1
    s22 = _local_mean(ref * ref, w) - mu2 * mu2
    s12 = _local_mean(img * ref, w) - mu1 * mu2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))
