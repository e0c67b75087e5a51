"""Per-Gaussian rigid motion field, joint two-view training and test-time alignment.

Every Gaussian lives in the frame-0 world.  Its field entry is the rigid
motion carrying it to the frame-1 world; intermediate times follow the screw
path ``exp(r log T)``.  Region 0 is the static background and keeps the
identity motion.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import NonFiniteLoss, UnknownRegion
from .geometry import (CameraIntrinsics, SE3Transform, hat, matrix_to_quat, matrix_to_rot6d,
                       quat_to_matrix, rot6d_backward, rot6d_to_matrix, se3_exp_batch,
                       se3_interpolate, se3_log_batch)
from .optim import Adam
from .splat.gaussians import GaussianSet, sigmoid
from .splat.losses import image_loss
from .splat.raster import RenderConfig, rasterize, rasterize_backward

log = logging.getLogger(__name__)

STATIC = 0


@dataclass
class MotionField:
    rot6: np.ndarray       # (N, 6)
    trans: np.ndarray      # (N, 3)
    region_id: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.rot6)

    def copy(self) -> "MotionField":
        return MotionField(self.rot6.copy(), self.trans.copy(), self.region_id.copy())

    def params(self) -> dict[str, np.ndarray]:
        return {"field_rot6": self.rot6, "field_trans": self.trans}

    @classmethod
    def identity(cls, region_id) -> "MotionField":
        rid = np.asarray(region_id, dtype=np.int64).copy()
        n = len(rid)
        return cls(np.tile([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], (n, 1)), np.zeros((n, 3)), rid)


def init_field(gaussians: GaussianSet, t_obj: dict[int, SE3Transform],
               identity: bool = False) -> MotionField:
    """Copy each region's object motion onto its Gaussians; static stays identity.

    ``identity=True`` leaves every entry at the identity (the no-initialization ablation).
    """
    fld = MotionField.identity(gaussians.region_id)
    if identity:
        return fld
    for r in np.unique(fld.region_id):
        r = int(r)
        if r == STATIC:
            continue
        if r not in t_obj:
            raise UnknownRegion(f"no object motion for region {r}")
        m = fld.region_id == r
        fld.rot6[m] = matrix_to_rot6d(t_obj[r].rotation)
        fld.trans[m] = t_obj[r].translation
    return fld


def _ratio_array(fld: MotionField, ratio) -> np.ndarray:
    """Per-Gaussian ratios from a scalar or a ``{region: ratio}`` mapping."""
    if isinstance(ratio, dict):
        r = np.zeros(len(fld))
        for k, v in ratio.items():
            r[fld.region_id == int(k)] = float(v)
    else:
        r = np.full(len(fld), float(ratio))
    if np.any((r < 0.0) | (r > 1.0)):
        raise ValueError("ratio must lie in [0, 1]")
    return r


def field_motion(fld: MotionField, ratio=1.0, xi: np.ndarray | None = None):
    """Per-Gaussian ``(R, t)`` at ``ratio``; exact at 0 and 1."""
    r = _ratio_array(fld, ratio)
    n = len(fld)
    R = np.repeat(np.eye(3)[None], n, axis=0)
    t = np.zeros((n, 3))
    one = r == 1.0
    R[one] = rot6d_to_matrix(fld.rot6[one])
    t[one] = fld.trans[one]
    mid = (r > 0.0) & ~one
    if mid.any():
        if xi is None:
            xi_mid = se3_log_batch(rot6d_to_matrix(fld.rot6[mid]), fld.trans[mid])
        else:
            xi_mid = xi[mid]
        R[mid], t[mid] = se3_exp_batch(r[mid, None] * xi_mid)
    return R, t


def apply_field(gaussians: GaussianSet, fld: MotionField, ratio) -> GaussianSet:
    """Gaussians moved along their motions to ``ratio`` (scalar or per-region dict)."""
    R, t = field_motion(fld, ratio)
    out = gaussians.copy()
    out.positions = np.einsum("nij,nj->ni", R, gaussians.positions) + t
    out.quats = matrix_to_quat(R @ quat_to_matrix(gaussians.quats))
    # keep the sign convention of the input so ratio 0 is exact
    flip = np.sum(out.quats * gaussians.quats, axis=1) < 0
    out.quats[flip] *= -1.0
    if not isinstance(ratio, dict) and float(ratio) == 0.0:
        out.quats = gaussians.quats.copy()
    return out


def _huber(x: np.ndarray, delta: float):
    a = np.abs(x)
    quad = a <= delta
    val = np.where(quad, 0.5 * x * x, delta * (a - 0.5 * delta))
    grad = np.where(quad, x, delta * np.sign(x))
    return val, grad


def _group_deviation(values: np.ndarray, groups: np.ndarray, delta: float):
    """Huber of each row's deviation from its group mean: total and gradient."""
    uniq, inv = np.unique(groups, return_inverse=True)
    counts = np.bincount(inv).astype(np.float64)
    mean = np.stack([np.bincount(inv, weights=values[:, k]) for k in range(values.shape[1])],
                    axis=1) / counts[:, None]
    val, h = _huber(values - mean[inv], delta)
    h_mean = np.stack([np.bincount(inv, weights=h[:, k]) for k in range(h.shape[1])],
                      axis=1) / counts[:, None]
    return float(val.sum()), h - h_mean[inv]


def field_regularization(fld: MotionField, lambda_t: float = 1.0, lambda_r: float = 1.0,
                         delta: float = 0.01):
    """Pull each dynamic region's motions toward the region's mean motion.

    Returns ``(value, {"field_rot6": ..., "field_trans": ...})``.
    """
    g_rot6 = np.zeros_like(fld.rot6)
    g_trans = np.zeros_like(fld.trans)
    dyn = fld.region_id != STATIC
    if not dyn.any():
        return 0.0, {"field_rot6": g_rot6, "field_trans": g_trans}
    groups = fld.region_id[dyn]
    lt, gt = _group_deviation(fld.trans[dyn], groups, delta)
    Rn = rot6d_to_matrix(fld.rot6[dyn])
    lr, gn = _group_deviation(matrix_to_rot6d(Rn), groups, delta)
    gR = np.zeros_like(Rn)
    gR[:, :, 0] = gn[:, :3]
    gR[:, :, 1] = gn[:, 3:]
    g_trans[dyn] = lambda_t * gt
    g_rot6[dyn] = lambda_r * rot6d_backward(fld.rot6[dyn], gR)
    return lambda_t * lt + lambda_r * lr, {"field_rot6": g_rot6, "field_trans": g_trans}


# ---------------------------------------------------------------------------
# joint training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    iters: int = 1000
    lr_positions: float = 2e-4
    lr_quats: float = 1e-3
    lr_log_scales: float = 5e-3
    lr_opacity: float = 0.05
    lr_colors: float = 2.5e-3
    lr_field: float = 1e-4
    lr_camera: float = 1e-4
    lambda_t: float = 1.0
    lambda_r: float = 1.0
    huber_delta: float = 0.01
    reg_weight: float = 1.0
    seed: int = 0
    render: RenderConfig = dc_field(default_factory=RenderConfig)
    record_every: int = 10

    def __post_init__(self):
        for k in ("lr_positions", "lr_quats", "lr_log_scales", "lr_opacity", "lr_colors",
                  "lr_field", "lr_camera"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be positive")
        for k in ("lambda_t", "lambda_r", "reg_weight"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "render"}
        d["render"] = self.render.to_dict()
        return d


@dataclass
class TrainResult:
    gaussians: GaussianSet
    field: MotionField
    t_cam: SE3Transform
    history: list[dict] = dc_field(default_factory=list)
    final: dict = dc_field(default_factory=dict)


def _frame_losses(g, fld, cam, K, I0, I1, cfg: TrainConfig, with_grads=True):
    rc = cfg.render
    out0 = rasterize(g, SE3Transform.identity(), K, rc)
    R, t = field_motion(fld, 1.0)
    out1 = rasterize(g, cam, K, rc, motion=(R, t))
    l0, gi0 = image_loss(out0.image, I0, rc.dssim_weight)
    l1, gi1 = image_loss(out1.image, I1, rc.dssim_weight)
    reg, greg = field_regularization(fld, cfg.lambda_t, cfg.lambda_r, cfg.huber_delta)
    terms = {"frame0": l0, "frame1": l1, "field_reg": cfg.reg_weight * reg}
    if not with_grads:
        return terms, None, (out0, out1)
    g0 = rasterize_backward(out0, gi0)
    g1 = rasterize_backward(out1, gi1)
    grads = {k: g0[k] + g1[k] for k in ("positions", "quats", "log_scales", "logit_opacity", "colors")}
    fixed = fld.region_id == STATIC
    g_rot6 = rot6d_backward(fld.rot6, g1["motion_R"]) + cfg.reg_weight * greg["field_rot6"]
    g_trans = g1["motion_t"] + cfg.reg_weight * greg["field_trans"]
    g_rot6[fixed] = 0.0
    g_trans[fixed] = 0.0
    grads["field_rot6"] = g_rot6
    grads["field_trans"] = g_trans
    grads["cam_rot6"] = g1["cam_rot6"]
    grads["cam_translation"] = g1["cam_translation"]
    return terms, grads, (out0, out1)


def train(gaussians: GaussianSet, fld: MotionField, t_cam: SE3Transform, I0: np.ndarray,
          I1: np.ndarray, K: CameraIntrinsics, cfg: TrainConfig = TrainConfig(),
          callback=None) -> TrainResult:
    """Fit Gaussians, motion field and the frame-1 camera to both input frames.

    Frame 0 is the world gauge (camera at identity, ratio 0); frame 1 is seen
    from ``t_cam`` with the full field motion applied.  Inputs are not modified.
    ``callback(it, outputs)`` is invoked with the two renders of every step.
    """
    g = gaussians.copy()
    fld = fld.copy()
    cam_rot6 = t_cam.rot6.copy()
    cam_t = t_cam.translation.copy()
    params = {**g.params(), **fld.params(), "cam_rot6": cam_rot6, "cam_translation": cam_t}
    lrs = {"positions": cfg.lr_positions, "quats": cfg.lr_quats,
           "log_scales": cfg.lr_log_scales, "logit_opacity": cfg.lr_opacity,
           "colors": cfg.lr_colors, "field_rot6": cfg.lr_field, "field_trans": cfg.lr_field,
           "cam_rot6": cfg.lr_camera, "cam_translation": cfg.lr_camera}
    opt = Adam(params, lrs)
    history = []
    for it in range(cfg.iters + 1):
        cam = SE3Transform(cam_rot6, cam_t)
        last = it == cfg.iters
        terms, grads, outs = _frame_losses(g, fld, cam, K, I0, I1, cfg, with_grads=not last)
        for name, v in terms.items():
            if not np.isfinite(v):
                raise NonFiniteLoss(it, name)
        if callback is not None:
            callback(it, outs)
        if it % cfg.record_every == 0 or last:
            history.append({"iter": it, "total": float(sum(terms.values())),
                            **{k: float(v) for k, v in terms.items()}})
        if last:
            break
        opt.step(grads)
        g.normalize_quats()
    log.info("training done: %s", history[-1])
    return TrainResult(g, fld, SE3Transform(cam_rot6.copy(), cam_t.copy()), history,
                       dict(history[-1]))


# ---------------------------------------------------------------------------
# test-time alignment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AlignConfig:
    iters: int = 300
    lr_pose: float = 1e-4
    lr_ratio: float = 2e-2
    optimize_ratios: bool = True
    init_ratio: float = 0.5
    render: RenderConfig = dc_field(default_factory=RenderConfig)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "render"}
        d["render"] = self.render.to_dict()
        return d


@dataclass
class AlignResult:
    t_cam_test: SE3Transform
    ratios: dict[int, float]
    final_loss: float
    history: list[dict] = dc_field(default_factory=list)

    def to_dict(self) -> dict:
        return {"t_cam_test": self.t_cam_test.to_dict(),
                "ratios": {str(k): v for k, v in sorted(self.ratios.items())},
                "final_loss": self.final_loss, "history": self.history}


def _logit(p: float) -> float:
    return float(np.log(p) - np.log1p(-p))


def render_at(gaussians: GaussianSet, fld: MotionField, cam: SE3Transform, K: CameraIntrinsics,
              ratio, cfg: RenderConfig | None = None):
    """Render with every Gaussian moved to ``ratio`` (scalar or per-region dict)."""
    return rasterize(gaussians, cam, K, cfg, motion=field_motion(fld, ratio))


def align_objective(gaussians: GaussianSet, xi: np.ndarray, masks: list[np.ndarray],
                    ratios: np.ndarray, cam: SE3Transform, K: CameraIntrinsics,
                    I_test: np.ndarray, render: RenderConfig = RenderConfig()):
    """Photometric loss of a render with region ``k`` moved to ``ratios[k]``.

    Returns ``(loss, dloss/dratios, raster gradients)``.
    """
    r_g = np.zeros(len(xi))
    for m, r in zip(masks, ratios):
        r_g[m] = r
    R, t = se3_exp_batch(r_g[:, None] * xi)
    out = rasterize(gaussians, cam, K, render, motion=(R, t))
    loss, gimg = image_loss(out.image, I_test, render.dssim_weight)
    gr = rasterize_backward(out, gimg)
    # d/dr exp(r xi) = xi^ exp(r xi): dR = W R, dt = W t + v
    W = hat(xi[:, 3:])
    dR = W @ R
    dt = np.einsum("nij,nj->ni", W, t) + xi[:, :3]
    g_r = np.sum(gr["motion_R"] * dR, axis=(1, 2)) + np.sum(gr["motion_t"] * dt, axis=1)
    return float(loss), np.array([g_r[m].sum() for m in masks]), gr


def test_time_align(gaussians: GaussianSet, fld: MotionField, I_test: np.ndarray,
                    K: CameraIntrinsics, init_pose: SE3Transform,
                    cfg: AlignConfig = AlignConfig()) -> AlignResult:
    """Fit the test camera and one motion ratio per dynamic region; the model stays frozen."""
    xi = se3_log_batch(rot6d_to_matrix(fld.rot6), fld.trans)
    regions = sorted(int(r) for r in np.unique(fld.region_id) if r != STATIC)
    masks = [fld.region_id == r for r in regions]
    logits = np.full(len(regions), _logit(cfg.init_ratio))
    cam_rot6 = init_pose.rot6.copy()
    cam_t = init_pose.translation.copy()
    params = {"cam_rot6": cam_rot6, "cam_translation": cam_t}
    lrs = {"cam_rot6": cfg.lr_pose, "cam_translation": cfg.lr_pose}
    if cfg.optimize_ratios and regions:
        params["logits"] = logits
        lrs["logits"] = cfg.lr_ratio
    opt = Adam(params, lrs)
    history = []
    loss = float("nan")
    for it in range(cfg.iters + 1):
        s = sigmoid(logits)
        loss, g_r, gr = align_objective(gaussians, xi, masks, s, SE3Transform(cam_rot6, cam_t), K,
                                        I_test, cfg.render)
        if not np.isfinite(loss):
            raise NonFiniteLoss(it, "align")
        history.append({"iter": it, "loss": loss,
                        **{str(r): float(v) for r, v in zip(regions, s)}})
        if it == cfg.iters:
            break
        opt.step({"cam_rot6": gr["cam_rot6"], "cam_translation": gr["cam_translation"],
                  "logits": g_r * s * (1.0 - s)})
    ratios = {r: float(sigmoid(v)) for r, v in zip(regions, logits)}
    return AlignResult(SE3Transform(cam_rot6.copy(), cam_t.copy()), ratios, float(loss), history)


test_time_align.__test__ = False  # keep pytest from collecting it by name


def default_test_pose(t_cam: SE3Transform) -> SE3Transform:
    return se3_interpolate(t_cam, 0.5)
