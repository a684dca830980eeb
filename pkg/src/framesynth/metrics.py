"""Image quality metrics (PSNR, SSIM) and residual occlusion maps.

All metrics operate on (3, h, w) float images in [0, 1]. PSNR uses MAX=1
and is capped at 99 dB in place of infinity for identical inputs. SSIM
follows the standard windowed luminance/contrast/structure comparison on
the channel-mean gray image: 11x11 gaussian window with sigma 1.5, K1=0.01,
K2=0.03, valid-window positions only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PSNR_CAP_DB = 99.0
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


@dataclass
class QualityScore:
    psnr_db: float
    ssim: float


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image shape mismatch: {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/mse) for unit-range images, capped at 99 dB."""
    _check_pair(a, b)
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = _SSIM_WINDOW, sigma: float = _SSIM_SIGMA) -> np.ndarray:
    """Normalized 2D gaussian weight mask."""
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g1 = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g1, g1)
    return win / win.sum()


def _to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img.mean(axis=0)
    if img.ndim == 2:
        return img
    raise ValueError(f"expected (3,h,w) or (h,w) image, got shape {img.shape}")


def _window_means(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    # valid-mode windowed weighted means over all positions
    views = np.lib.stride_tricks.sliding_window_view(x, win.shape)
    return np.tensordot(views, win, axes=([2, 3], [0, 1]))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM over valid 11x11 gaussian windows of the gray images."""
    _check_pair(np.asarray(a), np.asarray(b))
    ga, gb = _to_gray(a), _to_gray(b)
    win = gaussian_window()
    if ga.shape[0] < win.shape[0] or ga.shape[1] < win.shape[1]:
        raise ValueError(
            f"image {ga.shape} smaller than the {win.shape} SSIM window")
    c1 = (_SSIM_K1 * 1.0) ** 2
    c2 = (_SSIM_K2 * 1.0) ** 2
    mu_a = _window_means(ga, win)
    mu_b = _window_means(gb, win)
    e_aa = _window_means(ga * ga, win)
    e_bb = _window_means(gb * gb, win)
    e_ab = _window_means(ga * gb, win)
    var_a = e_aa - mu_a ** 2
    var_b = e_bb - mu_b ** 2
    cov = e_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def score(pred: np.ndarray, truth: np.ndarray) -> QualityScore:
    return QualityScore(psnr_db=psnr(pred, truth), ssim=ssim(pred, truth))


def residual_map(pred: np.ndarray, truth: np.ndarray):
    """Per-pixel mean absolute channel difference scaled to [0, 255].
    Returns (map, min, max); the map is a float (h, w) grid ready for the
    grayscale PPM writer."""
    _check_pair(np.asarray(pred), np.asarray(truth))
    diff = np.abs(np.asarray(pred, dtype=np.float64) - truth).mean(axis=0)
    heat = np.clip(diff * 255.0, 0.0, 255.0)
    return heat, float(heat.min()), float(heat.max())
