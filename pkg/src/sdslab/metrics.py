"""Image-space metrics: PSNR, MaskIoU and windowed SSIM."""

from __future__ import annotations

from itertools import combinations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgument

PSNR_IDENTICAL = 99.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _pair(a, b)
    if peak <= 0:
        raise InvalidArgument("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * np.log10(peak**2 / mse)


def mask_iou(a, b, threshold: float = 0.5) -> float:
    a, b = _pair(a, b)
    ma, mb = a > threshold, b > threshold
    union = np.count_nonzero(ma | mb)
    if union == 0:
        return 1.0
    return np.count_nonzero(ma & mb) / union


def ssim(a, b, data_range: float = 1.0, window: int = 8) -> float:
    """Mean SSIM over all sliding uniform windows (size ``window`` per axis,
    shrunk to the array extent), K1 = 0.01, K2 = 0.03."""
    a, b = _pair(a, b)
    win = tuple(min(window, n) for n in a.shape)
    axes = tuple(range(a.ndim, 2 * a.ndim))
    wa = sliding_window_view(a, win)
    wb = sliding_window_view(b, win)
    mu_a = wa.mean(axis=axes)
    mu_b = wb.mean(axis=axes)
    var_a = wa.var(axis=axes)
    var_b = wb.var(axis=axes)
    cov = (wa * wb).mean(axis=axes) - mu_a * mu_b
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def pairwise_ssim(grids, data_range: float = 1.0, window: int = 8) -> float:
    grids = [np.asarray(g, dtype=np.float64) for g in grids]
    if len(grids) < 2:
        raise InvalidArgument("pairwise SSIM needs at least two grids")
    if any(g.shape != grids[0].shape for g in grids):
        raise InvalidArgument("all grids must share a shape")
    vals = [ssim(a, b, data_range, window) for a, b in combinations(grids, 2)]
    return float(np.mean(vals))
