"""Depth-sorted tile rasterization of a GaussianSet, forward and reverse mode."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionMismatch, StaleIntermediates
from ..geometry import CameraIntrinsics, SE3Transform, rot6d_backward
from . import get_kernels, num_threads
from .gaussians import GaussianSet, sigmoid
from .project import Projected, project_backward, project_gaussians


@dataclass(frozen=True)
class RenderConfig:
    near_clip: float = 0.01
    alpha_threshold: float = 1.0 / 255.0
    gaussian_extent: float = 3.0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    dssim_weight: float = 0.2
    tile_size: int = 8

    def __post_init__(self):
        if not self.near_clip > 0:
            raise ValueError("near_clip must be positive")
        if not self.gaussian_extent > 0:
            raise ValueError("gaussian_extent must be positive")
        if not 0.0 <= self.dssim_weight <= 1.0:
            raise ValueError("dssim_weight must lie in [0, 1]")
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")
        object.__setattr__(self, "background", tuple(float(c) for c in self.background))

    def to_dict(self) -> dict:
        return {"near_clip": self.near_clip, "alpha_threshold": self.alpha_threshold,
                "gaussian_extent": self.gaussian_extent, "background": list(self.background),
                "dssim_weight": self.dssim_weight, "tile_size": self.tile_size}


@dataclass
class Bins:
    order: np.ndarray         # visible Gaussians, front to back
    tile_offsets: np.ndarray  # CSR offsets, one row per tile
    entry_gauss: np.ndarray   # Gaussian index per (tile, gaussian) entry
    max_len: int


@dataclass
class RenderOutput:
    image: np.ndarray    # (H, W, 3)
    alpha: np.ndarray    # (H, W) accumulated opacity, 1 - final transmittance
    winner: np.ndarray   # (H, W) index of the max-weight Gaussian, -1 if none
    ncontrib: np.ndarray
    # saved for rasterize_backward
    cfg: RenderConfig
    K: CameraIntrinsics
    cam: SE3Transform
    proj: Projected
    bins: Bins
    opacity: np.ndarray
    colors: np.ndarray
    has_motion: bool
    backend: str


def bin_gaussians(proj: Projected, K: CameraIntrinsics, tile: int) -> Bins:
    ntx = (K.width + tile - 1) // tile
    nty = (K.height + tile - 1) // tile
    m, r = proj.mean2d, proj.radius
    ok = proj.valid & np.isfinite(m).all(axis=1)
    ok &= (m[:, 0] + r >= 0) & (m[:, 0] - r <= K.width - 1)
    ok &= (m[:, 1] + r >= 0) & (m[:, 1] - r <= K.height - 1)
    idx = np.nonzero(ok)[0]
    order = idx[np.argsort(proj.depth[idx], kind="stable")]
    if order.size == 0:
        return Bins(order, np.zeros(ntx * nty + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), 0)
    mo, ro = m[order], r[order]
    x0 = np.clip(np.floor((mo[:, 0] - ro) / tile), 0, ntx - 1).astype(np.int64)
    x1 = np.clip(np.floor((mo[:, 0] + ro) / tile), 0, ntx - 1).astype(np.int64)
    y0 = np.clip(np.floor((mo[:, 1] - ro) / tile), 0, nty - 1).astype(np.int64)
    y1 = np.clip(np.floor((mo[:, 1] + ro) / tile), 0, nty - 1).astype(np.int64)
    wx = x1 - x0 + 1
    counts = wx * (y1 - y0 + 1)
    owner = np.repeat(np.arange(len(order)), counts)
    # position of each entry within its Gaussian's tile rectangle
    local = np.arange(owner.size) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = x0[owner] + local % wx[owner]
    ty = y0[owner] + local // wx[owner]
    tile_id = ty * ntx + tx
    perm = np.argsort(tile_id, kind="stable")  # keeps depth order inside each tile
    entry_gauss = order[owner[perm]].astype(np.int64)
    per_tile = np.bincount(tile_id, minlength=ntx * nty)
    offsets = np.zeros(ntx * nty + 1, dtype=np.int64)
    np.cumsum(per_tile, out=offsets[1:])
    return Bins(order, offsets, entry_gauss, int(per_tile.max()))


def rasterize(gaussians: GaussianSet, cam: SE3Transform, K: CameraIntrinsics,
              cfg: RenderConfig | None = None,
              motion: tuple[np.ndarray, np.ndarray] | None = None,
              backend: str | None = None) -> RenderOutput:
    """Render ``gaussians`` seen by world-to-camera transform ``cam``.

    ``motion`` is an optional per-Gaussian rigid motion ``(R, t)`` applied to
    the Gaussians (means and shape rotations) before viewing.
    """
    cfg = cfg or RenderConfig()
    proj = project_gaussians(gaussians.positions, gaussians.quats, gaussians.log_scales, K,
                             cam.rotation, cam.translation, cfg.near_clip, cfg.gaussian_extent,
                             motion)
    bins = bin_gaussians(proj, K, cfg.tile_size)
    opacity = np.ascontiguousarray(sigmoid(gaussians.logit_opacity))
    colors = np.ascontiguousarray(gaussians.colors, dtype=np.float64)
    kern = get_kernels(backend)
    image, trans, winner, ncontrib = kern.composite_forward(
        np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic), opacity, colors,
        bins.tile_offsets, bins.entry_gauss, K.width, K.height, cfg.tile_size,
        np.asarray(cfg.background, dtype=np.float64), cfg.gaussian_extent ** 2,
        cfg.alpha_threshold, num_threads())
    return RenderOutput(image, 1.0 - trans, winner, ncontrib, cfg, K, cam, proj, bins, opacity,
                        colors, motion is not None, kern.__name__.rsplit(".", 1)[-1])


def rasterize_backward(out: RenderOutput, grad_image: np.ndarray,
                       cfg: RenderConfig | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given ``dL/dimage``.

    Keys: positions, quats, log_scales, logit_opacity, colors, cam_rot6,
    cam_translation, and motion_R / motion_t when the forward pass had a motion.
    Depth order is held fixed.
    """
    if cfg is not None and cfg != out.cfg:
        raise StaleIntermediates("render config differs from the one used in the forward pass")
    if grad_image.shape != out.image.shape:
        raise DimensionMismatch(f"gradient image {grad_image.shape} vs render {out.image.shape}")
    cfg, K, proj, bins = out.cfg, out.K, out.proj, out.bins
    n = len(out.opacity)
    kern = get_kernels("python" if out.backend == "_kernels_py" else "cython")
    per_entry = kern.composite_backward(
        np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic), out.opacity,
        out.colors, bins.tile_offsets, bins.entry_gauss, K.width, K.height, cfg.tile_size,
        np.asarray(cfg.background, dtype=np.float64), cfg.gaussian_extent ** 2,
        cfg.alpha_threshold, np.ascontiguousarray(grad_image, dtype=np.float64), bins.max_len,
        num_threads())
    # ordered per-Gaussian reduction over tile entries
    acc = np.stack([np.bincount(bins.entry_gauss, weights=per_entry[:, k], minlength=n)
                    for k in range(9)], axis=1) if n else np.zeros((0, 9))
    grads = project_backward(proj, acc[:, 0:2], acc[:, 2:5])
    op = out.opacity
    result = {
        "positions": grads["positions"],
        "quats": grads["quats"],
        "log_scales": grads["log_scales"],
        "logit_opacity": acc[:, 5] * op * (1.0 - op),
        "colors": acc[:, 6:9],
        "cam_rot6": rot6d_backward(out.cam.rot6, grads["view_R"]),
        "cam_translation": grads["view_t"],
    }
    if out.has_motion:
        result["motion_R"] = grads["motion_R"]
        result["motion_t"] = grads["motion_t"]
    return result
