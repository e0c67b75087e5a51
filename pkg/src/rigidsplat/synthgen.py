"""Synthetic two-view scenes with exact geometry, for testing every stage.

The scene is a large background sphere seen from inside plus one or more
small object spheres that each move rigidly.  Images are rendered with the
splat renderer from Gaussian blobs lying on those surfaces; depth, labels and
flow come from exact ray/sphere intersection, so they are consistent with
each other to float precision.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigInfeasible
from .geometry import (CameraIntrinsics, SE3Transform, matrix_to_quat, pixel_rays, se3_compose,
                       se3_exp, se3_interpolate, se3_inverse)
from .splat.gaussians import GaussianSet, logit
from .splat.raster import RenderConfig, rasterize
from .tensorio import Oracle, Scene, write_manifest

TAG_SCENE = 0x5343


@dataclass(frozen=True)
class NoiseSpec:
    depth: float = 0.0          # log-normal sigma, multiplicative
    flow: float = 0.0           # additive Gaussian sigma, pixels
    mask_px: int = 0            # > 0 erodes dynamic masks, < 0 dilates them
    flow_fwd_drop: float = 0.0  # fraction of columns whose forward flow is invalidated

    def is_zero(self) -> bool:
        return self.depth == 0 and self.flow == 0 and self.mask_px == 0 and self.flow_fwd_drop == 0


@dataclass(frozen=True)
class SynthConfig:
    width: int = 64
    height: int = 64
    focal: float = 64.0
    n_objects: int = 1
    bg_center: tuple[float, float, float] = (0.5, 0.3, 1.0)
    bg_radius: float = 7.0
    object_radius: float = 0.8
    object_depth: float = 3.5
    bg_blob_step: float = 1.0     # pixels between background blobs
    object_blobs: int = 2000
    cam_rot_deg: float = 2.0
    cam_trans: float = 0.15
    obj_rot_deg: float = 10.0
    obj_trans: float = 0.6
    ratio: float = 0.5
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0

    def __post_init__(self):
        for k in ("cam_rot_deg", "cam_trans", "obj_rot_deg", "obj_trans", "object_blobs"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("ratio must lie in [0, 1]")
        if self.width < 2 or self.height < 2 or self.n_objects < 0:
            raise ValueError("invalid image size or object count")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.focal, (self.width - 1) / 2.0,
                                (self.height - 1) / 2.0, self.width, self.height)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "noise" in d:
            d["noise"] = NoiseSpec(**d["noise"])
        for k in ("bg_center",):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class SynthBundle:
    K: CameraIntrinsics
    rasters: dict[str, np.ndarray]   # i0 i1 d0 d1 flow_fwd flow_bwd labels labels1
    i_test: np.ndarray
    oracle: Oracle
    gaussians: GaussianSet           # ground-truth blobs, frame-0 world
    config: SynthConfig

    def to_scene(self) -> Scene:
        r = self.rasters
        return Scene(self.K, r["i0"], r["i1"], r["d0"], r["d1"], r["flow_fwd"], r["flow_bwd"],
                     r["labels"], r.get("labels1"), self.i_test, self.oracle)

    def write(self, directory) -> Path:
        return write_manifest(directory, self.K, self.rasters, self.i_test, self.oracle,
                              extra={"synth": json.loads(json.dumps(self.config.to_dict()))})


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

def _unit(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _ray_sphere(rays: np.ndarray, center: np.ndarray, radius: float, far: bool) -> np.ndarray:
    """z-depth along un-normalized rays (z component 1) to a sphere; NaN on a miss."""
    a = np.sum(rays * rays, axis=-1)
    b = -2.0 * rays @ center
    c = center @ center - radius * radius
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore"):
        s = np.sqrt(disc)
    lam = (-b + s) / (2 * a) if far else (-b - s) / (2 * a)
    return np.where((disc >= 0) & (lam > 1e-6), lam, np.nan)


def _surface_hits(K: CameraIntrinsics, bg_c, bg_r, obj_cs, obj_r):
    """Depth and label maps for a camera whose frame holds the given sphere centers."""
    rays = pixel_rays(K, K.pixel_grid().reshape(-1, 2))
    depth = _ray_sphere(rays, bg_c, bg_r, far=True)
    labels = np.zeros(len(rays), dtype=np.int64)
    for i, c in enumerate(obj_cs):
        d = _ray_sphere(rays, c, obj_r, far=False)
        hit = np.isfinite(d) & (~np.isfinite(depth) | (d < depth))
        depth = np.where(hit, d, depth)
        labels[hit] = i + 1
    return depth.reshape(K.height, K.width), labels.reshape(K.height, K.width)


def _frame_quats(normals: np.ndarray) -> np.ndarray:
    """Quaternions whose local z axis is the given normal."""
    z = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    ref = np.where(np.abs(z[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    x = np.cross(ref, z)
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y = np.cross(z, x)
    return matrix_to_quat(np.stack([x, y, z], axis=-1))


def _texture(rng, n_waves: int, freq: float):
    w = rng.normal(size=(3, n_waves, 3)) * freq
    ph = rng.uniform(0, 2 * np.pi, size=(3, n_waves))
    amp = rng.uniform(0.08, 0.18, size=(3, n_waves))
    base = rng.uniform(0.35, 0.65, size=3)

    def tex(p):
        arg = np.einsum("ckd,nd->nck", w, p) + ph
        return np.clip(base + np.sum(amp * np.sin(arg), axis=-1), 0.02, 0.98)
    return tex


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], -1)


def _object_centers(cfg: SynthConfig) -> list[np.ndarray]:
    n = cfg.n_objects
    spread = 2.2 * cfg.object_radius
    return [np.array([(i - (n - 1) / 2.0) * spread, 0.0, cfg.object_depth]) for i in range(n)]


def _build_blobs(cfg: SynthConfig, K: CameraIntrinsics, rng) -> GaussianSet:
    bg_c = np.asarray(cfg.bg_center, dtype=np.float64)
    margin = 10.0
    step = cfg.bg_blob_step
    us = np.arange(-margin, K.width + margin, step)
    vs = np.arange(-margin, K.height + margin, step)
    uu, vv = np.meshgrid(us, vs)
    rays = pixel_rays(K, np.stack([uu.ravel(), vv.ravel()], axis=-1))
    lam = _ray_sphere(rays, bg_c, cfg.bg_radius, far=True)
    pts = rays * lam[:, None]
    normals = bg_c - pts
    spacing = step * lam / cfg.focal
    tex_bg = _texture(rng, 4, 2.0)
    sets = [_blob_set(pts, normals, 0.6 * spacing, tex_bg(pts), 0)]
    for i, c in enumerate(_object_centers(cfg)):
        dirs = _fibonacci_sphere(cfg.object_blobs)
        p = c + cfg.object_radius * dirs
        sp = cfg.object_radius * np.sqrt(4 * np.pi / max(cfg.object_blobs, 1))
        tex = _texture(rng, 4, 5.0)
        sets.append(_blob_set(p, dirs, np.full(len(p), 0.6 * sp), tex(p - c), i + 1))
    return GaussianSet.concat(sets)


def _blob_set(pts, normals, sigma, colors, region) -> GaussianSet:
    n = len(pts)
    scales = np.stack([sigma, sigma, 0.1 * sigma], axis=-1)
    return GaussianSet(pts, _frame_quats(normals), np.log(scales), np.full(n, float(logit(0.95))),
                       colors, np.full(n, region, dtype=np.int64))


def _rotation(axis, deg) -> np.ndarray:
    return se3_exp(np.concatenate([np.zeros(3), axis * np.deg2rad(deg)])).rotation


def _motions(cfg: SynthConfig, rng):
    t_cam = SE3Transform.from_matrix(_rotation(_unit(rng), cfg.cam_rot_deg),
                                     _unit(rng) * cfg.cam_trans)
    t_obj = {}
    for i, c in enumerate(_object_centers(cfg)):
        R = _rotation(_unit(rng), cfg.obj_rot_deg)
        d = _unit(rng)
        d[2] *= 0.25  # keep most of the motion parallel to the image plane
        d /= np.linalg.norm(d)
        t_obj[i + 1] = SE3Transform.from_matrix(R, c + d * cfg.obj_trans - R @ c)
    return t_cam, t_obj


def _motion_arrays(gs: GaussianSet, t_obj: dict[int, SE3Transform], ratio: float):
    n = len(gs)
    R = np.repeat(np.eye(3)[None], n, axis=0)
    t = np.zeros((n, 3))
    for k, T in t_obj.items():
        Ti = T if ratio == 1.0 else se3_interpolate(T, ratio)
        m = gs.region_id == k
        R[m] = Ti.rotation
        t[m] = Ti.translation
    return R, t


def _check_feasible(cfg, K, t_cam, t_obj, t_mid):
    bg_c = np.asarray(cfg.bg_center, dtype=np.float64)
    for name, cam in (("frame 0", SE3Transform.identity()), ("frame 1", t_cam), ("mid", t_mid)):
        centre = se3_inverse(cam).translation
        if np.linalg.norm(centre - bg_c) > cfg.bg_radius - 1.0:
            raise ConfigInfeasible(f"{name} camera leaves the background sphere")
    for ratio, cam in ((0.0, SE3Transform.identity()), (1.0, t_cam), (cfg.ratio, t_mid)):
        for k, c in enumerate(_object_centers(cfg)):
            T = t_obj[k + 1] if ratio == 1.0 else se3_interpolate(t_obj[k + 1], ratio)
            pc = cam.apply(T.apply(c))
            if pc[2] < cfg.object_radius + 0.1:
                raise ConfigInfeasible(f"object {k + 1} is too close to the camera")
            u = K.fx * pc[0] / pc[2] + K.cx
            v = K.fy * pc[1] / pc[2] + K.cy
            if not (0 <= u <= K.width - 1 and 0 <= v <= K.height - 1):
                raise ConfigInfeasible(f"object {k + 1} leaves the frustum at ratio {ratio}")


def _project_rows(K, pts):
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.stack([K.fx * pts[:, 0] / pts[:, 2] + K.cx, K.fy * pts[:, 1] / pts[:, 2] + K.cy], -1)


def _flow(K, depth, labels, src_to_dst: dict[int, SE3Transform]):
    grid = K.pixel_grid()
    pts = pixel_rays(K, grid.reshape(-1, 2)) * depth.reshape(-1, 1)
    out = np.full_like(pts, np.nan)
    lab = labels.reshape(-1)
    for k, T in src_to_dst.items():
        m = lab == k
        out[m] = T.apply(pts[m])
    # difference of two projections, so an identity motion gives exactly zero flow
    return (_project_rows(K, out) - _project_rows(K, pts)).reshape(K.height, K.width, 2)


def generate(cfg: SynthConfig = SynthConfig()) -> SynthBundle:
    """Build an exact two-view bundle (plus a mid-frame at ``cfg.ratio``)."""
    K = cfg.intrinsics
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, TAG_SCENE]))
    t_cam, t_obj = _motions(cfg, rng)
    t_mid = se3_interpolate(t_cam, cfg.ratio)
    _check_feasible(cfg, K, t_cam, t_obj, t_mid)
    blobs = _build_blobs(cfg, K, rng)
    rcfg = RenderConfig()

    def render(ratio, cam):
        R, t = _motion_arrays(blobs, t_obj, ratio)
        return rasterize(blobs, cam, K, rcfg, motion=(R, t)).image

    i0 = render(0.0, SE3Transform.identity())
    i1 = render(1.0, t_cam)
    i_test = render(cfg.ratio, t_mid)

    bg_c = np.asarray(cfg.bg_center, dtype=np.float64)
    centers = _object_centers(cfg)
    d0, l0 = _surface_hits(K, bg_c, cfg.bg_radius, centers, cfg.object_radius)
    moved = [t_cam.apply(t_obj[k + 1].apply(c)) for k, c in enumerate(centers)]
    d1, l1 = _surface_hits(K, t_cam.apply(bg_c), cfg.bg_radius, moved, cfg.object_radius)
    # frame-0 camera is the world frame
    fwd = {0: t_cam, **{k: se3_compose(t_cam, T) for k, T in t_obj.items()}}
    cam_inv = se3_inverse(t_cam)
    bwd = {0: cam_inv, **{k: se3_compose(se3_inverse(T), cam_inv) for k, T in t_obj.items()}}
    flow_fwd = _flow(K, d0, l0, fwd)
    flow_bwd = _flow(K, d1, l1, bwd)

    pts0 = pixel_rays(K, K.pixel_grid().reshape(-1, 2)) * d0.reshape(-1, 1)
    pts0 = pts0[np.all(np.isfinite(pts0), axis=1)]
    diameter = float(np.linalg.norm(pts0.max(axis=0) - pts0.min(axis=0)))
    oracle = Oracle(t_cam, t_obj, cfg.ratio, t_mid, diameter)
    rasters = {"i0": i0, "i1": i1, "d0": d0, "d1": d1, "flow_fwd": flow_fwd,
               "flow_bwd": flow_bwd, "labels": l0, "labels1": l1}
    bundle = SynthBundle(K, rasters, i_test, oracle, blobs, cfg)
    if not cfg.noise.is_zero():
        bundle = perturb(bundle, cfg.noise, cfg.seed)
    return bundle


def _alter_masks(labels: np.ndarray, px: int) -> np.ndarray:
    out = labels.copy()
    for k in np.unique(labels):
        if k == 0:
            continue
        m = labels == k
        if px > 0:
            keep = ndimage.binary_erosion(m, iterations=px)
            out[m & ~keep] = 0
        else:
            grown = ndimage.binary_dilation(m, iterations=-px)
            out[grown & (labels == 0)] = k
    return out


def perturb(bundle: SynthBundle, spec: NoiseSpec, seed: int = 0) -> SynthBundle:
    """Noisy copy of ``bundle``; images and the oracle block are untouched."""
    rasters = {k: v.copy() for k, v in bundle.rasters.items()}
    if spec.is_zero():
        return replace(bundle, rasters=rasters)
    ss = np.random.SeedSequence([seed, 0x4E4F4953])
    r_depth, r_flow = (np.random.default_rng(s) for s in ss.spawn(2))
    if spec.depth > 0:
        for k in ("d0", "d1"):
            rasters[k] = rasters[k] * np.exp(spec.depth * r_depth.standard_normal(rasters[k].shape))
    if spec.flow > 0:
        for k in ("flow_fwd", "flow_bwd"):
            rasters[k] = rasters[k] + spec.flow * r_flow.standard_normal(rasters[k].shape)
    if spec.mask_px != 0:
        for k in ("labels", "labels1"):
            rasters[k] = _alter_masks(rasters[k], spec.mask_px)
    if spec.flow_fwd_drop > 0:
        w = bundle.K.width
        n = int(round(spec.flow_fwd_drop * w))
        start = (w - n) // 2
        rasters["flow_fwd"][:, start:start + n] = np.nan
    return replace(bundle, rasters=rasters)
