"""Photometric losses and image-quality metrics."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from ..errors import DimensionMismatch

WINDOW = 11
SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2
PSNR_CAP = 99.0


def _window():
    x = np.arange(WINDOW) - WINDOW // 2
    g = np.exp(-0.5 * (x / SIGMA) ** 2)
    return g / g.sum()


_G = _window()


def _blur(img):
    # separable, zero padded; symmetric kernel so this operator is its own adjoint
    out = correlate1d(img, _G, axis=0, mode="constant")
    return correlate1d(out, _G, axis=1, mode="constant")


def _check(a, b):
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")


def _ssim_parts(x, y):
    mx, my = _blur(x), _blur(y)
    sxx = _blur(x * x) - mx * mx
    syy = _blur(y * y) - my * my
    sxy = _blur(x * y) - mx * my
    a1 = 2 * mx * my + C1
    a2 = 2 * sxy + C2
    b1 = mx * mx + my * my + C1
    b2 = sxx + syy + C2
    return mx, my, a1, a2, b1, b2


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check(a, b)
    _, _, a1, a2, b1, b2 = _ssim_parts(a, b)
    return float(np.mean(a1 * a2 / (b1 * b2)))


def ssim_with_grad(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean SSIM and its gradient with respect to ``x``."""
    mx, my, a1, a2, b1, b2 = _ssim_parts(x, y)
    D = b1 * b2
    S = a1 * a2 / D
    scale = 1.0 / S.size
    g_mx = (2 * my * (a2 - a1) - S * 2 * mx * (b2 - b1)) / D * scale
    g_mxy = 2 * a1 / D * scale
    g_mxx = -S / b2 * scale
    grad = _blur(g_mx) + 2 * x * _blur(g_mxx) + y * _blur(g_mxy)
    return float(S.mean()), grad


def image_loss(rendered: np.ndarray, target: np.ndarray, dssim_weight: float = 0.2):
    """``(1-w)*mean|r-t| + w*(1-SSIM)/2``; returns ``(loss, dloss/drendered)``."""
    r = np.asarray(rendered, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    _check(r, t)
    diff = r - t
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - dssim_weight) * np.sign(diff) / diff.size
    loss = (1.0 - dssim_weight) * l1
    if dssim_weight > 0:
        s, gs = ssim_with_grad(r, t)
        loss += dssim_weight * 0.5 * (1.0 - s)
        grad = grad - dssim_weight * 0.5 * gs
    return loss, grad


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def metrics(rendered: np.ndarray, target: np.ndarray) -> dict:
    return {"psnr": psnr(rendered, target), "ssim": ssim(rendered, target),
            "l1": float(np.mean(np.abs(np.asarray(rendered, float) - np.asarray(target, float))))}
