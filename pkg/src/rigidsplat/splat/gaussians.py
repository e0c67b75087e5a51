"""Columnar Gaussian storage and per-pixel initialization."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from ..errors import NoValidPixels
from ..geometry import CameraIntrinsics, SE3Transform, pixel_rays, se3_inverse

INIT_OPACITY = 0.7


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianSet:
    positions: np.ndarray      # (N, 3) world frame
    quats: np.ndarray          # (N, 4) shape rotation, (w, x, y, z)
    log_scales: np.ndarray     # (N, 3)
    logit_opacity: np.ndarray  # (N,)
    colors: np.ndarray         # (N, 3)
    region_id: np.ndarray      # (N,) int

    def __post_init__(self):
        n = len(self.positions)
        for f in fields(self):
            arr = getattr(self, f.name)
            if len(arr) != n:
                raise ValueError(f"{f.name} has {len(arr)} rows, expected {n}")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.logit_opacity)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def copy(self) -> "GaussianSet":
        return GaussianSet(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def subset(self, idx) -> "GaussianSet":
        return GaussianSet(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    def params(self) -> dict[str, np.ndarray]:
        """Optimizable arrays, by name (views, not copies)."""
        return {"positions": self.positions, "quats": self.quats, "log_scales": self.log_scales,
                "logit_opacity": self.logit_opacity, "colors": self.colors}

    def normalize_quats(self) -> None:
        self.quats /= np.linalg.norm(self.quats, axis=1, keepdims=True)

    @classmethod
    def empty(cls) -> "GaussianSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, 3)), np.zeros(0, dtype=np.int64))

    @classmethod
    def concat(cls, sets: list["GaussianSet"]) -> "GaussianSet":
        return cls(**{f.name: np.concatenate([getattr(s, f.name) for s in sets])
                      for f in fields(cls)})

    @classmethod
    def isotropic(cls, positions, scale, opacity, colors, region_id=None) -> "GaussianSet":
        """Convenience constructor used by tests and the oracle generator."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(positions)
        scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (n,))
        opacity = np.broadcast_to(np.asarray(opacity, dtype=np.float64), (n,))
        quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        rid = np.zeros(n, dtype=np.int64) if region_id is None else \
            np.broadcast_to(np.asarray(region_id, dtype=np.int64), (n,)).copy()
        return cls(positions.copy(), quats, np.log(np.repeat(scale[:, None], 3, axis=1)),
                   logit(opacity).copy(),
                   np.broadcast_to(np.asarray(colors, dtype=np.float64), (n, 3)).copy(), rid)


def init_gaussians(image: np.ndarray, depth: np.ndarray, labels: np.ndarray, K: CameraIntrinsics,
                   cam_pose: SE3Transform, stride: int = 1,
                   mask: np.ndarray | None = None) -> GaussianSet:
    """One Gaussian per valid pixel (every ``stride``-th pixel on both axes).

    ``cam_pose`` maps world coordinates into this frame's camera.
    """
    h, w = depth.shape
    sel = np.zeros((h, w), dtype=bool)
    sel[::stride, ::stride] = True
    valid = sel & np.isfinite(depth) & (np.nan_to_num(depth, nan=-1.0) > 0)
    if mask is not None:
        valid &= mask
    v, u = np.nonzero(valid)
    if v.size == 0:
        raise NoValidPixels("no pixel with valid depth")
    d = depth[v, u]
    cam_pts = pixel_rays(K, np.stack([u, v], axis=-1).astype(np.float64)) * d[:, None]
    world = se3_inverse(cam_pose).apply(cam_pts)
    scale = d * max(1.0 / K.fx, 1.0 / K.fy) * stride
    n = len(d)
    return GaussianSet(
        positions=world,
        quats=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=np.repeat(np.log(scale)[:, None], 3, axis=1),
        logit_opacity=np.full(n, float(logit(INIT_OPACITY))),
        colors=np.clip(image[v, u].astype(np.float64), 0.0, 1.0),
        region_id=labels[v, u].astype(np.int64),
    )
