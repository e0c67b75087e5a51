"""Flow sampling and forward-backward consistency weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, OutOfBounds


@dataclass(frozen=True)
class ConsistencyParams:
    alpha: float = 0.01
    beta: float = 0.5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")


def in_bounds(p: np.ndarray, width: int, height: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return ((p[..., 0] >= 0) & (p[..., 0] <= width - 1)
            & (p[..., 1] >= 0) & (p[..., 1] <= height - 1))


def bilinear(grid: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Bilinearly sample ``grid`` (H, W[, C]) at pixels ``p`` (..., 2).

    Positions outside the image, or with a NaN among the four taps, give NaN.
    """
    grid = np.asarray(grid, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    h, w = grid.shape[:2]
    ok = in_bounds(p, w, h)
    x = np.where(ok, p[..., 0], 0.0)
    y = np.where(ok, p[..., 1], 0.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    if grid.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
        okb = ok[..., None]
    else:
        okb = ok
    # a NaN tap poisons the sample even when its weight is zero
    def tap(yy, xx, wgt):
        v = grid[yy, xx]
        return np.where(wgt > 0, v * wgt, np.where(np.isnan(v), np.nan, 0.0))

    out = (tap(y0, x0, (1 - fx) * (1 - fy)) + tap(y0, x1, fx * (1 - fy))
           + tap(y1, x0, (1 - fx) * fy) + tap(y1, x1, fx * fy))
    return np.where(okb, out, np.nan)


def sample_flow(flow: np.ndarray, p) -> np.ndarray:
    """Bilinear flow lookup at one continuous pixel position."""
    p = np.asarray(p, dtype=np.float64)
    h, w = flow.shape[:2]
    if not np.all(in_bounds(p, w, h)):
        raise OutOfBounds(f"pixel {p.tolist()} outside {w}x{h} image")
    return bilinear(flow, p)


def track(p0, flow_fwd: np.ndarray) -> np.ndarray:
    """``p0 + f(p0)``; the result may fall outside the image."""
    p0 = np.asarray(p0, dtype=np.float64)
    return p0 + sample_flow(flow_fwd, p0)


def forward_backward_weights(flow_fwd: np.ndarray, flow_bwd: np.ndarray,
                             params: ConsistencyParams = ConsistencyParams()) -> np.ndarray:
    """Binary confidence of ``flow_fwd`` checked against ``flow_bwd``.

    Swap the arguments to get the backward weights.
    """
    if flow_fwd.shape != flow_bwd.shape:
        raise DimensionMismatch(f"flow shapes differ: {flow_fwd.shape} vs {flow_bwd.shape}")
    h, w = flow_fwd.shape[:2]
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    p0 = np.stack([u, v], axis=-1)
    p1 = p0 + flow_fwd
    back = bilinear(flow_bwd, p1)
    r = flow_fwd + back
    r2 = np.sum(r * r, axis=-1)
    bound = params.alpha * (np.sum(flow_fwd ** 2, axis=-1) + np.sum(back ** 2, axis=-1)) + params.beta
    with np.errstate(invalid="ignore"):
        ok = (r2 < bound) & np.all(np.isfinite(back), axis=-1) & np.all(np.isfinite(flow_fwd), axis=-1)
    return ok.astype(np.float64)


def inbounds_weights(flow_fwd: np.ndarray) -> np.ndarray:
    """Fallback weights when no backward flow exists: 1 wherever the track stays inside."""
    h, w = flow_fwd.shape[:2]
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    p1 = np.stack([u, v], axis=-1) + flow_fwd
    return (in_bounds(p1, w, h) & np.all(np.isfinite(flow_fwd), axis=-1)).astype(np.float64)
