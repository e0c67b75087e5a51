"""Per-region rigid motion from flow correspondences: DLT + Gauss-Newton PnP inside RANSAC."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .correspondence import in_bounds
from .errors import DegenerateConfiguration, EmptyRegion, InsufficientInliers
from .geometry import CameraIntrinsics, SE3Transform, hat, pixel_rays, se3_exp_batch

MIN_POINTS = 6
MAX_RANSAC_POINTS = 5000


@dataclass(frozen=True)
class RansacParams:
    threshold: float = 2.0
    max_iters: int = 1000
    min_inliers: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.threshold <= 0 or self.max_iters < 1:
            raise ValueError("threshold must be > 0 and max_iters >= 1")


@dataclass
class RegionCorrespondences:
    region_id: int
    points3d: np.ndarray   # (M, 3) frame-0 camera coordinates
    pixels1: np.ndarray    # (M, 2) tracked positions in frame 1
    weights: np.ndarray    # (M,)
    pixels0: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.points3d)

    def subset(self, idx) -> "RegionCorrespondences":
        p0 = None if self.pixels0 is None else self.pixels0[idx]
        return RegionCorrespondences(self.region_id, self.points3d[idx], self.pixels1[idx],
                                     self.weights[idx], p0)


def build_region_correspondences(region_id: int, labels: np.ndarray, D0: np.ndarray,
                                 f_fwd: np.ndarray, W_fwd: np.ndarray,
                                 K: CameraIntrinsics) -> RegionCorrespondences:
    mask = (labels == region_id) & (W_fwd > 0) & np.isfinite(D0) & (np.nan_to_num(D0) > 0)
    v, u = np.nonzero(mask)
    p0 = np.stack([u, v], axis=-1).astype(np.float64)
    p1 = p0 + f_fwd[v, u]
    keep = in_bounds(p1, K.width, K.height) & np.all(np.isfinite(p1), axis=-1)
    p0, p1 = p0[keep], p1[keep]
    if len(p0) == 0:
        raise EmptyRegion(f"region {region_id} has no valid correspondence")
    d = D0[v[keep], u[keep]]
    P = pixel_rays(K, p0) * d[:, None]
    return RegionCorrespondences(region_id, P, p1, W_fwd[v[keep], u[keep]].astype(np.float64), p0)


def reprojection_errors(T_R: np.ndarray, T_t: np.ndarray, P: np.ndarray, px: np.ndarray,
                        K: CameraIntrinsics) -> np.ndarray:
    """Euclidean pixel error per correspondence; inf where the point lands behind the camera."""
    Q = P @ T_R.T + T_t
    z = Q[:, 2]
    err = np.full(len(P), np.inf)
    ok = z > 1e-6
    u = K.fx * Q[ok, 0] / z[ok] + K.cx
    v = K.fy * Q[ok, 1] / z[ok] + K.cy
    err[ok] = np.hypot(u - px[ok, 0], v - px[ok, 1])
    return err


def _dlt(P: np.ndarray, px: np.ndarray, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    n = len(P)
    # normalized image coordinates, then Hartley-style conditioning of the 3D side
    x = (px[:, 0] - K.cx) / K.fx
    y = (px[:, 1] - K.cy) / K.fy
    c = P.mean(axis=0)
    s = np.sqrt(3.0) / max(np.mean(np.linalg.norm(P - c, axis=1)), 1e-12)
    Pn = (P - c) * s
    Xh = np.hstack([Pn, np.ones((n, 1))])
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -x[:, None] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -y[:, None] * Xh
    _, S, Vt = np.linalg.svd(A, full_matrices=False)
    if S.size < 11 or S[10] <= 1e-9 * S[0]:
        raise DegenerateConfiguration("rank-deficient DLT system")
    M = Vt[-1].reshape(3, 4)
    # undo conditioning: X_n = s (X - c)
    Tn = np.eye(4)
    Tn[:3, :3] *= s
    Tn[:3, 3] = -s * c
    M = M @ Tn
    A3, b = M[:, :3], M[:, 3]
    U, sv, Vt3 = np.linalg.svd(A3)
    scale = sv.mean()
    if scale <= 1e-15:
        raise DegenerateConfiguration("degenerate DLT solution")
    R = U @ Vt3
    if np.linalg.det(R) < 0:
        R, scale = -R, -scale
    # the projective sign is fixed by det(R) = +1, so no cheirality flip remains
    return R, b / scale


def _gauss_newton(R: np.ndarray, t: np.ndarray, P: np.ndarray, px: np.ndarray,
                  K: CameraIntrinsics, iters: int = 20, tol: float = 1e-10):
    """Left-perturbation Gauss-Newton on the squared reprojection error."""
    for _ in range(iters):
        Q = P @ R.T + t
        z = Q[:, 2]
        if np.any(z <= 1e-9):
            break
        iz = 1.0 / z
        r = np.empty((len(P), 2))
        r[:, 0] = K.fx * Q[:, 0] * iz + K.cx - px[:, 0]
        r[:, 1] = K.fy * Q[:, 1] * iz + K.cy - px[:, 1]
        Jp = np.zeros((len(P), 2, 3))
        Jp[:, 0, 0] = K.fx * iz
        Jp[:, 0, 2] = -K.fx * Q[:, 0] * iz * iz
        Jp[:, 1, 1] = K.fy * iz
        Jp[:, 1, 2] = -K.fy * Q[:, 1] * iz * iz
        # dQ/d(rho, phi) for Q' = exp(xi) Q: [I, -hat(Q)]
        J = np.concatenate([Jp, -Jp @ hat(Q)], axis=2).reshape(-1, 6)
        g = J.T @ r.reshape(-1)
        if np.linalg.norm(g) < tol:
            break
        H = J.T @ J
        try:
            dx = -np.linalg.solve(H + 1e-12 * np.eye(6), g)
        except np.linalg.LinAlgError:
            break
        dR, dt = se3_exp_batch(dx)
        R, t = dR @ R, dR @ t + dt
        if np.linalg.norm(dx) < 1e-14:
            break
    return R, t


def pnp_solve(corrs: RegionCorrespondences, K: CameraIntrinsics) -> SE3Transform:
    """Motion mapping ``points3d`` onto ``pixels1``: DLT, then Gauss-Newton refinement."""
    P = np.asarray(corrs.points3d, dtype=np.float64)
    px = np.asarray(corrs.pixels1, dtype=np.float64)
    if len(P) < MIN_POINTS:
        raise DegenerateConfiguration(f"need at least {MIN_POINTS} correspondences, got {len(P)}")
    R, t = _dlt(P, px, K)
    R, t = _gauss_newton(R, t, P, px, K)
    return SE3Transform.from_matrix(R, t)


def _iteration_rng(seed: int, i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0x52414E53, i]))


def subsample_for_ransac(corrs: RegionCorrespondences, seed: int,
                         limit: int = MAX_RANSAC_POINTS) -> RegionCorrespondences:
    if len(corrs) <= limit:
        return corrs
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x53554253, corrs.region_id]))
    idx = np.sort(rng.choice(len(corrs), size=limit, replace=False))
    return corrs.subset(idx)


def ransac_pnp(corrs: RegionCorrespondences, K: CameraIntrinsics,
               params: RansacParams = RansacParams()) -> tuple[SE3Transform, np.ndarray]:
    """Robust PnP. Returns the refit transform and the inlier mask over ``corrs``."""
    n = len(corrs)
    if n < max(params.min_inliers, MIN_POINTS):
        raise InsufficientInliers(
            f"region {corrs.region_id}: {n} correspondences < min_inliers {params.min_inliers}")
    P, px = corrs.points3d, corrs.pixels1
    best_count, best_res, best = -1, np.inf, None
    for i in range(params.max_iters):
        idx = _iteration_rng(params.seed, i).choice(n, size=MIN_POINTS, replace=False)
        try:
            R, t = _dlt(P[idx], px[idx], K)
            R, t = _gauss_newton(R, t, P[idx], px[idx], K)
        except DegenerateConfiguration:
            continue
        err = reprojection_errors(R, t, P, px, K)
        inl = err < params.threshold
        count = int(inl.sum())
        if count == 0:
            continue
        res = float(err[inl].mean())
        if count > best_count or (count == best_count and res < best_res):
            best_count, best_res, best = count, res, (R, t, inl)
    if best is None or best_count < params.min_inliers:
        raise InsufficientInliers(
            f"region {corrs.region_id}: best inlier count {max(best_count, 0)} < {params.min_inliers}")
    R, t, inl = best
    refit = pnp_solve(corrs.subset(np.nonzero(inl)[0]), K)
    err = reprojection_errors(refit.rotation, refit.translation, P, px, K)
    refit_inl = err < params.threshold
    if refit_inl.sum() < best_count:
        # refit must not lose support; keep the sampled model's mask in that case
        T = SE3Transform.from_matrix(R, t)
        return T, inl
    return refit, refit_inl
