"""Stage drivers shared by the command line and the tests."""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from .correspondence import ConsistencyParams, in_bounds
from .dense_ba import BAParams, BAResult, build_problem, run_ba, weights_for
from .errors import MalformedManifest, MissingFile, RigidSplatError
from .geometry import SE3Transform, pose_errors
from .init_pnp import RansacParams, build_region_correspondences, ransac_pnp, subsample_for_ransac
from .se3field import STATIC, field_motion, init_field
from .splat.gaussians import GaussianSet, init_gaussians
from .tensorio import Scene, read_scalar, write_scalar

log = logging.getLogger(__name__)

# stage tags for fanning one seed out into independent streams
TAG_RANSAC = 0x5241
TAG_TRAIN = 0x5452


def stage_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def staged(fn, stage: str):
    """Run ``fn`` and attach ``stage`` to any package error it raises."""
    try:
        return fn()
    except RigidSplatError as exc:
        if exc.stage is None:
            exc.stage = stage
        raise


def scene_weights(scene: Scene, consistency: ConsistencyParams = ConsistencyParams()):
    return weights_for(scene.flow_fwd, scene.flow_bwd, consistency)


def initial_motions(scene: Scene, W_fwd: np.ndarray, ransac: RansacParams = RansacParams()):
    """Per-region PnP + RANSAC on flow-tracked depth points."""
    transforms, stats = {}, {}
    for r in scene.region_ids:
        corrs = build_region_correspondences(r, scene.labels, scene.d0, scene.flow_fwd, W_fwd,
                                             scene.intrinsics)
        sub = subsample_for_ransac(corrs, ransac.seed)
        T, inl = ransac_pnp(sub, scene.intrinsics, ransac)
        transforms[r] = T
        stats[r] = {"correspondences": len(corrs), "sampled": len(sub), "inliers": int(inl.sum())}
    return transforms, stats


def estimate_motions(scene: Scene, ba: BAParams = BAParams(), ransac: RansacParams = RansacParams(),
                     consistency: ConsistencyParams = ConsistencyParams(),
                     W_fwd: np.ndarray | None = None, record_every: int = 50) -> BAResult:
    """PnP initialization followed by object-level dense BA."""
    W_f, W_b = scene_weights(scene, consistency)
    if W_fwd is not None:
        W_f = W_fwd
    transforms, stats = initial_motions(scene, W_f, ransac)
    static1 = None if scene.labels1 is None else scene.labels1 == STATIC
    problem = build_problem(scene.intrinsics, scene.labels, scene.d0, scene.d1, scene.flow_fwd,
                            W_f, scene.flow_bwd, W_b, ba.bidirectional and W_b is not None,
                            static1)
    return run_ba(problem, transforms, ba, stats, record_every)


def frame1_labels(labels0: np.ndarray, flow_bwd: np.ndarray) -> np.ndarray:
    """Frame-1 labels read off frame 0 through the backward flow (nearest pixel)."""
    h, w = labels0.shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    p0 = np.stack([u, v], axis=-1) + flow_bwd
    ok = in_bounds(p0, w, h) & np.all(np.isfinite(p0), axis=-1)
    ui = np.clip(np.round(np.nan_to_num(p0[..., 0])).astype(int), 0, w - 1)
    vi = np.clip(np.round(np.nan_to_num(p0[..., 1])).astype(int), 0, h - 1)
    return np.where(ok, labels0[vi, ui], STATIC)


def build_model(scene: Scene, ba: BAResult, stride: int = 1, se3_init: bool = True,
                consistency: ConsistencyParams = ConsistencyParams()):
    """Gaussians from both frames plus their motion field.

    Frame-0 pixels seed Gaussians directly in the world frame.  Frame-1 pixels
    whose backward flow fails the consistency check (content not visible in
    frame 0) add Gaussians too, carried back to time 0 through the inverse
    camera and field motions.
    """
    K = scene.intrinsics
    g0 = init_gaussians(scene.i0, ba.depth0, scene.labels, K, SE3Transform.identity(), stride)
    sets = [g0]
    if scene.flow_bwd is not None:
        _, W_bwd = weights_for(scene.flow_fwd, scene.flow_bwd, consistency)
        labels1 = scene.labels1 if scene.labels1 is not None else \
            frame1_labels(scene.labels, scene.flow_bwd)
        gap = W_bwd == 0
        if gap.any():
            try:
                g1 = init_gaussians(scene.i1, ba.depth1, labels1, K, ba.t_cam, stride, mask=gap)
            except RigidSplatError:
                g1 = None
            if g1 is not None:
                fld1 = init_field(g1, ba.t_obj, identity=not se3_init)
                R, t = field_motion(fld1, 1.0)
                # invert each Gaussian's motion: X0 = R^T (X1 - t)
                g1.positions = np.einsum("nji,nj->ni", R, g1.positions - t)
                sets.append(g1)
    gaussians = GaussianSet.concat(sets)
    fld = init_field(gaussians, ba.t_obj, identity=not se3_init)
    return gaussians, fld


def ba_errors(ba: BAResult, scene: Scene) -> dict:
    """Pose errors of a BA result against the oracle block, if present."""
    o = scene.oracle
    if o is None:
        return {}
    rot, trans = pose_errors(ba.t_cam, o.t_cam)
    out = {"t_cam": {"rot_deg": rot, "trans": trans}}
    for r, T in sorted(o.t_obj.items()):
        if r in ba.t_obj:
            rr, tt = pose_errors(ba.t_obj[r], T)
            out[f"t_obj_{r}"] = {"rot_deg": rr, "trans": tt}
    if o.scene_diameter:
        out["scene_diameter"] = o.scene_diameter
    return out


class StageTimer:
    """Collects wall-clock timings; kept out of reports so those stay reproducible."""

    def __init__(self):
        self.timings: dict[str, float] = {}

    def run(self, name: str, fn):
        t = time.perf_counter()
        out = staged(fn, name)
        self.timings[name] = time.perf_counter() - t
        return out


def save_ba(path, ba: BAResult) -> None:
    """BA report as JSON with the refined depth maps as PFM files beside it."""
    path = Path(path)
    stem = path.with_suffix("")
    doc = ba.to_report()
    for key, arr in (("depth0", ba.depth0), ("depth1", ba.depth1)):
        name = f"{stem.name}_{key}.pfm"
        write_scalar(path.parent / name, arr)
        doc[key] = name
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_ba(path) -> BAResult:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"BA result {path} does not exist")
    try:
        doc = json.loads(path.read_text())
        t_cam = SE3Transform.from_dict(doc["t_cam"])
        t_obj = {int(e["region"]): SE3Transform.from_dict(e) for e in doc["t_obj"]}
        relative = {int(e["region"]): SE3Transform.from_dict(e) for e in doc.get("relative", [])}
        depths = []
        for key in ("depth0", "depth1"):
            p = path.parent / doc[key]
            if not p.exists():
                raise MissingFile(f"'{key}' -> {p} does not exist")
            depths.append(read_scalar(p).astype(np.float64))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedManifest(f"{path}: not a BA result ({exc})") from exc
    return BAResult(t_cam, t_obj, relative, depths[0], depths[1],
                    np.asarray(doc.get("scale_shift", [1.0, 0.0, 1.0, 0.0]), dtype=np.float64),
                    doc.get("final_losses", {}), doc.get("initial_losses", {}),
                    doc.get("trajectory", []),
                    {int(k): v for k, v in doc.get("init_stats", {}).items()})
