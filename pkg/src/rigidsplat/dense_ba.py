"""Object-level dense bundle adjustment.

Every labelled region ``i`` owns a rigid motion ``T_i`` taking frame-0 camera
coordinates to frame-1 camera coordinates.  The objective, per region, is

    lambda1 * sum_p W(p) |pi(K T_i D0hat(p) K^-1 p) - (p + f(p))|_1
  + lambda2 * ( sum_p |D0hat(p) - (theta0 D0(p) + gamma0)|_1
              + sum_p W(p) |T_i P0hat(p) - (theta1 D1(p1) + gamma1) K^-1 p1|_1 )

and, in bidirectional mode, the mirrored terms for the static region seen
from frame 1 through ``T_0^-1`` and the backward flow.  L1 terms are
optimized through a Huber smoothing; reported values are the plain L1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .correspondence import (ConsistencyParams, bilinear, forward_backward_weights,
                             in_bounds, inbounds_weights)
from .errors import EmptyRegion, NonFiniteLoss
from .geometry import (MIN_DEPTH, CameraIntrinsics, SE3Transform, pixel_rays, rot6d_backward,
                       rot6d_to_matrix, se3_compose, se3_inverse)
from .optim import Adam

log = logging.getLogger(__name__)

TERMS = ("reproj", "depth_prior", "depth_cross", "reproj_bwd", "depth_prior_bwd", "depth_cross_bwd")


@dataclass(frozen=True)
class BAParams:
    lambda1: float = 1.0
    lambda2: float = 0.1
    lr_depth: float = 1e-3
    lr_pose: float = 1e-4
    iters: int = 2000
    bidirectional: bool = True
    # keep flow noise inside the quadratic zone: pure L1 with free per-pixel
    # depth has a pose minimum that shifts with the noise
    huber_px: float = 1.0
    huber_depth: float = 0.01
    anchor_frame0: bool = True  # hold theta0, gamma0 at (1, 0): frame-0 depth fixes the gauge

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.iters < 0:
            raise ValueError("weights must be >= 0 and iters >= 0")


@dataclass
class BAState:
    """Optimized quantities. Row ``k`` of ``rot6``/``trans`` belongs to ``regions[k]``."""

    regions: list[int]
    rot6: np.ndarray
    trans: np.ndarray
    log_d0: np.ndarray
    log_d1: np.ndarray | None
    scale_shift: np.ndarray  # theta0, gamma0, theta1, gamma1

    def transform(self, region: int) -> SE3Transform:
        k = self.regions.index(region)
        return SE3Transform(self.rot6[k], self.trans[k])

    def params(self) -> dict[str, np.ndarray]:
        p = {"rot6": self.rot6, "trans": self.trans, "log_d0": self.log_d0,
             "scale_shift": self.scale_shift}
        if self.log_d1 is not None:
            p["log_d1"] = self.log_d1
        return p

    def copy(self) -> "BAState":
        return BAState(list(self.regions), self.rot6.copy(), self.trans.copy(), self.log_d0.copy(),
                       None if self.log_d1 is None else self.log_d1.copy(), self.scale_shift.copy())


@dataclass
class BAResult:
    t_cam: SE3Transform
    t_obj: dict[int, SE3Transform]
    relative: dict[int, SE3Transform]
    depth0: np.ndarray
    depth1: np.ndarray
    scale_shift: np.ndarray
    final_losses: dict[str, float]
    initial_losses: dict[str, float]
    trajectory: list[dict[str, float]] = field(default_factory=list)
    init_stats: dict[int, dict] = field(default_factory=dict)

    def to_report(self) -> dict:
        return {
            "t_cam": self.t_cam.to_dict(),
            "t_obj": [dict(region=int(k), **v.to_dict()) for k, v in sorted(self.t_obj.items())],
            "relative": [dict(region=int(k), **v.to_dict()) for k, v in sorted(self.relative.items())],
            "scale_shift": [float(x) for x in self.scale_shift],
            "initial_losses": self.initial_losses,
            "final_losses": self.final_losses,
            "trajectory": self.trajectory,
            "init_stats": {str(k): v for k, v in sorted(self.init_stats.items())},
        }


# ---------------------------------------------------------------------------
# problem setup
# ---------------------------------------------------------------------------

@dataclass
class _RegionData:
    region: int
    idx_a: np.ndarray     # flat pixel indices with valid D0 (prior term)
    d0_a: np.ndarray
    idx: np.ndarray       # flat indices with W > 0 and in-bounds track
    ray0: np.ndarray
    p1: np.ndarray
    w: np.ndarray
    cross_ok: np.ndarray  # rows of idx whose D1(p1) is valid
    d1_at_p1: np.ndarray
    ray1: np.ndarray


@dataclass
class _BackwardData:
    idx1_a: np.ndarray
    d1_a: np.ndarray
    idx1: np.ndarray
    ray1: np.ndarray
    p0: np.ndarray
    w: np.ndarray
    cross_ok: np.ndarray
    d0_at_p0: np.ndarray
    ray0: np.ndarray


@dataclass
class BAProblem:
    K: CameraIntrinsics
    shape: tuple[int, int]
    regions: list[int]
    data: dict[int, _RegionData]
    backward: _BackwardData | None
    D0: np.ndarray
    D1: np.ndarray


def frame1_static_mask(labels0: np.ndarray, flow_bwd: np.ndarray) -> np.ndarray:
    """Static pixels of frame 1, read off frame-0 labels through the backward flow."""
    h, w = labels0.shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    p0 = np.stack([u, v], axis=-1) + flow_bwd
    ok = in_bounds(p0, w, h) & np.all(np.isfinite(p0), axis=-1)
    ui = np.clip(np.round(np.nan_to_num(p0[..., 0])).astype(int), 0, w - 1)
    vi = np.clip(np.round(np.nan_to_num(p0[..., 1])).astype(int), 0, h - 1)
    return ok & (labels0[vi, ui] == 0)


def _valid_depth(D: np.ndarray) -> np.ndarray:
    return np.isfinite(D) & (np.nan_to_num(D, nan=-1.0) > 0)


# relative tap spread above which a bilinear depth sample mixes two surfaces
EDGE_SPREAD = 0.1


def _sample_depth(D: np.ndarray, p: np.ndarray, edge_spread: float = EDGE_SPREAD):
    """Bilinear depth at ``p`` and a mask of samples that stay on one surface."""
    d = bilinear(D, p)
    h, w = D.shape
    x0 = np.clip(np.floor(np.nan_to_num(p[:, 0])).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(np.nan_to_num(p[:, 1])).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    taps = np.stack([D[y0, x0], D[y0, x1], D[y1, x0], D[y1, x1]], axis=1)
    with np.errstate(invalid="ignore"):
        lo, hi = taps.min(axis=1), taps.max(axis=1)
        ok = _valid_depth(d) & (lo > 0) & (hi - lo <= edge_spread * lo)
    return np.nan_to_num(d), ok


def build_problem(K: CameraIntrinsics, labels: np.ndarray, D0: np.ndarray, D1: np.ndarray,
                  f_fwd: np.ndarray, W_fwd: np.ndarray, f_bwd: np.ndarray | None = None,
                  W_bwd: np.ndarray | None = None, bidirectional: bool = False,
                  static1: np.ndarray | None = None,
                  regions: list[int] | None = None) -> BAProblem:
    h, w = labels.shape
    grid = K.pixel_grid().reshape(-1, 2)
    labels_f = labels.reshape(-1)
    D0f, D1f = D0.reshape(-1), D1.reshape(-1)
    valid0 = _valid_depth(D0f)
    regions = sorted(int(r) for r in np.unique(labels)) if regions is None else list(regions)
    data = {}
    for r in regions:
        in_r = labels_f == r
        idx_a = np.nonzero(in_r & valid0)[0]
        if idx_a.size == 0:
            raise EmptyRegion(f"region {r} has no pixel with valid depth")
        p0 = grid[idx_a]
        p1 = p0 + f_fwd.reshape(-1, 2)[idx_a]
        wts = W_fwd.reshape(-1)[idx_a]
        keep = (wts > 0) & in_bounds(p1, w, h) & np.all(np.isfinite(p1), axis=-1)
        idx = idx_a[keep]
        p1 = p1[keep]
        d1, cross_ok = _sample_depth(D1, p1)
        data[r] = _RegionData(r, idx_a, D0f[idx_a], idx, pixel_rays(K, grid[idx]), p1,
                              wts[keep].astype(np.float64), cross_ok, d1, pixel_rays(K, p1))
    back = None
    if bidirectional:
        if f_bwd is None or W_bwd is None:
            raise ValueError("bidirectional BA needs backward flow and weights")
        if static1 is None:
            static1 = frame1_static_mask(labels, f_bwd)
        valid1 = _valid_depth(D1f)
        idx1_a = np.nonzero(static1.reshape(-1) & valid1)[0]
        p1 = grid[idx1_a]
        p0 = p1 + f_bwd.reshape(-1, 2)[idx1_a]
        wts = W_bwd.reshape(-1)[idx1_a]
        keep = (wts > 0) & in_bounds(p0, w, h) & np.all(np.isfinite(p0), axis=-1)
        idx1 = idx1_a[keep]
        p0 = p0[keep]
        d0, cross_ok = _sample_depth(D0, p0)
        back = _BackwardData(idx1_a, D1f[idx1_a], idx1, pixel_rays(K, grid[idx1]), p0,
                             wts[keep].astype(np.float64), cross_ok, d0, pixel_rays(K, p0))
    return BAProblem(K, (h, w), regions, data, back, D0, D1)


def initial_state(problem: BAProblem, transforms: dict[int, SE3Transform]) -> BAState:
    rot6 = np.stack([transforms[r].rot6 for r in problem.regions])
    trans = np.stack([transforms[r].translation for r in problem.regions])
    log_d0 = np.log(np.where(_valid_depth(problem.D0), problem.D0, 1.0))
    log_d1 = None
    if problem.backward is not None:
        log_d1 = np.log(np.where(_valid_depth(problem.D1), problem.D1, 1.0))
    return BAState(list(problem.regions), rot6, trans, log_d0, log_d1,
                   np.array([1.0, 0.0, 1.0, 0.0]))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _smooth_l1(x: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Huber scaled to unit slope: value and derivative."""
    ax = np.abs(x)
    quad = ax <= delta
    val = np.where(quad, 0.5 * x * x / delta, ax - 0.5 * delta)
    grad = np.where(quad, x / delta, np.sign(x))
    return val, grad


@dataclass
class LossResult:
    """``terms`` hold plain-L1 values; ``smooth`` and ``grads`` the optimized objective."""

    terms: dict[str, float]
    smooth: float
    grads: dict[str, np.ndarray]

    @property
    def value(self) -> float:
        return float(sum(self.terms.values()))


def _zero_grads(state: BAState) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in state.params().items()}


def _project(K: CameraIntrinsics, Q: np.ndarray):
    iz = 1.0 / Q[:, 2]
    uv = np.stack([K.fx * Q[:, 0] * iz + K.cx, K.fy * Q[:, 1] * iz + K.cy], axis=-1)
    return uv, iz


def _project_backward(K: CameraIntrinsics, Q: np.ndarray, iz: np.ndarray, g_uv: np.ndarray):
    gQ = np.empty_like(Q)
    gQ[:, 0] = g_uv[:, 0] * K.fx * iz
    gQ[:, 1] = g_uv[:, 1] * K.fy * iz
    gQ[:, 2] = -(g_uv[:, 0] * K.fx * Q[:, 0] + g_uv[:, 1] * K.fy * Q[:, 1]) * iz * iz
    return gQ


def _region_reproj(problem, state, d: _RegionData, k: int, weight: float, delta: float,
                   grads, R=None):
    R = rot6d_to_matrix(state.rot6[k]) if R is None else R
    t = state.trans[k]
    depth = np.exp(state.log_d0.reshape(-1)[d.idx])
    P = d.ray0 * depth[:, None]
    Q = P @ R.T + t
    front = Q[:, 2] > MIN_DEPTH
    if not np.all(front):
        Q = np.where(front[:, None], Q, np.array([0.0, 0.0, 1.0]))
    uv, iz = _project(problem.K, Q)
    res = uv - d.p1
    sval, sgrad = _smooth_l1(res, delta)
    wf = d.w * front
    l1 = float(np.sum(wf[:, None] * np.abs(res)))
    smooth = float(np.sum(wf[:, None] * sval))
    if grads is not None and weight != 0.0:
        gQ = _project_backward(problem.K, Q, iz, weight * wf[:, None] * sgrad)
        _accumulate_pose(grads, k, state, gQ, P, R)
        gP = gQ @ R
        g_depth = np.sum(gP * d.ray0, axis=1) * depth
        grads["log_d0"].reshape(-1)[d.idx] += g_depth
    return l1, smooth, R


def _accumulate_pose(grads, k, state, gQ, P, R):
    gR = gQ.T @ P
    grads["rot6"][k] += rot6d_backward(state.rot6[k], gR)
    grads["trans"][k] += gQ.sum(axis=0)


def _region_depth(problem, state, d: _RegionData, k: int, weight: float, delta: float,
                  grads, R=None):
    R = rot6d_to_matrix(state.rot6[k]) if R is None else R
    th0, ga0, th1, ga1 = state.scale_shift
    # prior: D0hat ~ theta0 D0 + gamma0
    ld = state.log_d0.reshape(-1)
    dhat_a = np.exp(ld[d.idx_a])
    ea = dhat_a - (th0 * d.d0_a + ga0)
    va, ga = _smooth_l1(ea, delta)
    l1_a = float(np.sum(np.abs(ea)))
    sm_a = float(np.sum(va))
    # cross-frame: T P0hat ~ (theta1 D1(p1) + gamma1) K^-1 p1
    sel = d.cross_ok
    depth = np.exp(ld[d.idx[sel]])
    P = d.ray0[sel] * depth[:, None]
    Q = P @ R.T + state.trans[k]
    s1 = th1 * d.d1_at_p1[sel] + ga1
    eb = Q - s1[:, None] * d.ray1[sel]
    vb, gb = _smooth_l1(eb, delta)
    w = d.w[sel]
    l1_b = float(np.sum(w[:, None] * np.abs(eb)))
    sm_b = float(np.sum(w[:, None] * vb))
    if grads is not None and weight != 0.0:
        gda = weight * ga
        grads["log_d0"].reshape(-1)[d.idx_a] += gda * dhat_a
        grads["scale_shift"][0] -= np.sum(gda * d.d0_a)
        grads["scale_shift"][1] -= np.sum(gda)
        ge = weight * w[:, None] * gb
        _accumulate_pose(grads, k, state, ge, P, R)
        gP = ge @ R
        grads["log_d0"].reshape(-1)[d.idx[sel]] += np.sum(gP * d.ray0[sel], axis=1) * depth
        gs1 = -np.sum(ge * d.ray1[sel], axis=1)
        grads["scale_shift"][2] += np.sum(gs1 * d.d1_at_p1[sel])
        grads["scale_shift"][3] += np.sum(gs1)
    return l1_a, sm_a, l1_b, sm_b


def _backward_terms(problem, state, k0: int, params: BAParams, grads):
    b = problem.backward
    R = rot6d_to_matrix(state.rot6[k0])
    t = state.trans[k0]
    th0, ga0, th1, ga1 = state.scale_shift
    ld1 = state.log_d1.reshape(-1)
    out = {}
    # backward reprojection through T0^-1
    depth = np.exp(ld1[b.idx1])
    P1 = b.ray1 * depth[:, None]
    V = P1 - t
    Q = V @ R  # rows of R^T (P1 - t)
    front = Q[:, 2] > MIN_DEPTH
    if not np.all(front):
        Q = np.where(front[:, None], Q, np.array([0.0, 0.0, 1.0]))
    uv, iz = _project(problem.K, Q)
    res = uv - b.p0
    sval, sgrad = _smooth_l1(res, params.huber_px)
    wf = b.w * front
    out["reproj_bwd"] = (float(np.sum(wf[:, None] * np.abs(res))), float(np.sum(wf[:, None] * sval)))
    if grads is not None and params.lambda1 != 0.0:
        gQ = _project_backward(problem.K, Q, iz, params.lambda1 * wf[:, None] * sgrad)
        _backward_pose_grads(grads, state, k0, R, V, gQ)
        gP1 = gQ @ R.T
        grads["log_d1"].reshape(-1)[b.idx1] += np.sum(gP1 * b.ray1, axis=1) * depth
    # prior on D1hat
    dhat_a = np.exp(ld1[b.idx1_a])
    ea = dhat_a - (th1 * b.d1_a + ga1)
    va, ga = _smooth_l1(ea, params.huber_depth)
    out["depth_prior_bwd"] = (float(np.sum(np.abs(ea))), float(np.sum(va)))
    # cross-frame in reverse
    sel = b.cross_ok
    depth_s = np.exp(ld1[b.idx1[sel]])
    P1s = b.ray1[sel] * depth_s[:, None]
    Vs = P1s - t
    Qs = Vs @ R
    s0 = th0 * b.d0_at_p0[sel] + ga0
    eb = Qs - s0[:, None] * b.ray0[sel]
    vb, gb = _smooth_l1(eb, params.huber_depth)
    w = b.w[sel]
    out["depth_cross_bwd"] = (float(np.sum(w[:, None] * np.abs(eb))), float(np.sum(w[:, None] * vb)))
    if grads is not None and params.lambda2 != 0.0:
        gda = params.lambda2 * ga
        grads["log_d1"].reshape(-1)[b.idx1_a] += gda * dhat_a
        grads["scale_shift"][2] -= np.sum(gda * b.d1_a)
        grads["scale_shift"][3] -= np.sum(gda)
        ge = params.lambda2 * w[:, None] * gb
        _backward_pose_grads(grads, state, k0, R, Vs, ge)
        gP1 = ge @ R.T
        grads["log_d1"].reshape(-1)[b.idx1[sel]] += np.sum(gP1 * b.ray1[sel], axis=1) * depth_s
        gs0 = -np.sum(ge * b.ray0[sel], axis=1)
        grads["scale_shift"][0] += np.sum(gs0 * b.d0_at_p0[sel])
        grads["scale_shift"][1] += np.sum(gs0)
    return out


def _backward_pose_grads(grads, state, k0, R, V, gQ):
    # Q = R^T V with V = P1 - t
    gR = V.T @ gQ
    grads["rot6"][k0] += rot6d_backward(state.rot6[k0], gR)
    grads["trans"][k0] -= (gQ @ R.T).sum(axis=0)


def evaluate(problem: BAProblem, state: BAState, params: BAParams,
             with_grads: bool = True) -> LossResult:
    """The full objective: weighted sum over regions plus optional backward static terms."""
    grads = _zero_grads(state) if with_grads else None
    terms = {name: 0.0 for name in TERMS}
    smooth = 0.0
    for k, r in enumerate(state.regions):
        d = problem.data[r]
        R = rot6d_to_matrix(state.rot6[k])
        l1, sm, _ = _region_reproj(problem, state, d, k, params.lambda1, params.huber_px, grads, R)
        terms["reproj"] += params.lambda1 * l1
        smooth += params.lambda1 * sm
        la, sa, lb, sb = _region_depth(problem, state, d, k, params.lambda2, params.huber_depth,
                                       grads, R)
        terms["depth_prior"] += params.lambda2 * la
        terms["depth_cross"] += params.lambda2 * lb
        smooth += params.lambda2 * (sa + sb)
    if problem.backward is not None and state.log_d1 is not None and 0 in state.regions:
        k0 = state.regions.index(0)
        for name, (l1, sm) in _backward_terms(problem, state, k0, params, grads).items():
            lam = params.lambda1 if name == "reproj_bwd" else params.lambda2
            terms[name] += lam * l1
            smooth += lam * sm
    if not with_grads:
        grads = {}
    return LossResult(terms, smooth, grads)


# ---------------------------------------------------------------------------
# per-term entry points
# ---------------------------------------------------------------------------

def reproj_loss(state: BAState, region_id: int, K: CameraIntrinsics, f_fwd: np.ndarray,
                W_fwd: np.ndarray, labels: np.ndarray, delta: float = 0.1) -> LossResult:
    """Weighted L1 reprojection error of one region, with gradients of its Huber form."""
    D0 = np.exp(state.log_d0)
    problem = build_problem(K, labels, D0, D0, f_fwd, W_fwd, regions=[region_id])
    d = problem.data[region_id]
    if d.idx.size == 0:
        raise EmptyRegion(f"region {region_id} has no weighted pixel")
    k = state.regions.index(region_id)
    grads = _zero_grads(state)
    l1, sm, _ = _region_reproj(problem, state, d, k, 1.0, delta, grads)
    return LossResult({"reproj": l1}, sm, grads)


def depth_reg_loss(state: BAState, region_id: int, K: CameraIntrinsics, f_fwd: np.ndarray,
                   W_fwd: np.ndarray, D0: np.ndarray, D1: np.ndarray, labels: np.ndarray,
                   delta: float = 0.01) -> LossResult:
    """Depth prior plus cross-frame depth consistency for one region."""
    problem = build_problem(K, labels, D0, D1, f_fwd, W_fwd, regions=[region_id])
    d = problem.data[region_id]
    if d.idx_a.size == 0:
        raise EmptyRegion(f"region {region_id} is empty")
    k = state.regions.index(region_id)
    grads = _zero_grads(state)
    la, sa, lb, sb = _region_depth(problem, state, d, k, 1.0, delta, grads)
    return LossResult({"depth_prior": la, "depth_cross": lb}, sa + sb, grads)


def total_ba_loss(problem: BAProblem, state: BAState, params: BAParams) -> LossResult:
    return evaluate(problem, state, params)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

def decompose(state: BAState) -> tuple[SE3Transform, dict[int, SE3Transform]]:
    """Camera motion from the static region, world-frame object motions for the rest."""
    if 0 not in state.regions:
        raise EmptyRegion("no static region (label 0) to define the camera motion")
    t_cam = state.transform(0)
    cam_inv = se3_inverse(t_cam)
    t_obj = {r: se3_compose(cam_inv, state.transform(r)) for r in state.regions if r != 0}
    return t_cam, t_obj


def run_ba(problem: BAProblem, transforms: dict[int, SE3Transform], params: BAParams = BAParams(),
           init_stats: dict[int, dict] | None = None, record_every: int = 1) -> BAResult:
    state = initial_state(problem, transforms)
    opt = Adam(state.params(), {"rot6": params.lr_pose, "trans": params.lr_pose,
                                "log_d0": params.lr_depth, "log_d1": params.lr_depth,
                                "scale_shift": params.lr_depth})
    trajectory = []
    initial = None
    for it in range(params.iters + 1):
        res = evaluate(problem, state, params, with_grads=it < params.iters)
        for name, v in res.terms.items():
            if not np.isfinite(v):
                raise NonFiniteLoss(it, name)
        if not np.isfinite(res.smooth):
            raise NonFiniteLoss(it, "smooth")
        if initial is None:
            initial = dict(res.terms)
        if it % record_every == 0 or it == params.iters:
            trajectory.append({"iter": it, "total": res.value, **res.terms})
        if it == params.iters:
            break
        if params.anchor_frame0:
            # a free frame-0 affine lets the cross term shrink the whole scene
            res.grads["scale_shift"][:2] = 0.0
        opt.step(res.grads)
    final = dict(res.terms)
    t_cam, t_obj = decompose(state)
    d0 = np.where(_valid_depth(problem.D0), np.exp(state.log_d0), np.nan)
    th1, ga1 = state.scale_shift[2:]
    d1 = np.where(_valid_depth(problem.D1), th1 * problem.D1 + ga1, np.nan)
    if state.log_d1 is not None and problem.backward is not None:
        flat = d1.reshape(-1)
        flat[problem.backward.idx1_a] = np.exp(state.log_d1.reshape(-1)[problem.backward.idx1_a])
    relative = {r: state.transform(r) for r in state.regions}
    log.info("BA done: initial %.4g -> final %.4g", sum(initial.values()), sum(final.values()))
    return BAResult(t_cam, t_obj, relative, d0, d1, state.scale_shift.copy(), final, initial,
                    trajectory, dict(init_stats or {}))


def weights_for(f_fwd: np.ndarray, f_bwd: np.ndarray | None,
                params: ConsistencyParams = ConsistencyParams()):
    """(W_fwd, W_bwd); without backward flow only the in-bounds test applies."""
    if f_bwd is None:
        return inbounds_weights(f_fwd), None
    return (forward_backward_weights(f_fwd, f_bwd, params),
            forward_backward_weights(f_bwd, f_fwd, params))
