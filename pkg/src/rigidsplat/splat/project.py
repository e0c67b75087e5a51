"""Projection of 3D Gaussians to screen-space ellipses, and its reverse mode."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import Clipped
from ..geometry import CameraIntrinsics, SE3Transform, quat_backward, quat_to_matrix

DILATION = 0.3


@dataclass
class Projected:
    valid: np.ndarray
    mean2d: np.ndarray
    conic: np.ndarray    # (a, b, c) of the inverse 2D covariance [[a, b], [b, c]]
    cov2d: np.ndarray
    depth: np.ndarray
    radius: np.ndarray
    # saved for the backward pass
    X: np.ndarray
    Xw: np.ndarray
    Xc: np.ndarray
    Rq: np.ndarray
    Rs: np.ndarray
    Rm: np.ndarray | None
    s: np.ndarray
    quats: np.ndarray
    sigma_w: np.ndarray
    sigma_c: np.ndarray
    J: np.ndarray
    Rv: np.ndarray
    K: CameraIntrinsics


def project_gaussians(positions, quats, log_scales, K: CameraIntrinsics, Rv: np.ndarray,
                      tv: np.ndarray, near: float = 0.01, extent: float = 3.0,
                      motion: tuple[np.ndarray, np.ndarray] | None = None) -> Projected:
    """``motion`` is an optional per-Gaussian rigid motion ``(R (N,3,3), t (N,3))`` applied first."""
    X = np.asarray(positions, dtype=np.float64)
    Rq = quat_to_matrix(quats)
    if motion is not None:
        Rm, tm = motion
        Xw = np.einsum("nij,nj->ni", Rm, X) + tm
        Rs = Rm @ Rq
    else:
        Rm = None
        Xw = X
        Rs = Rq
    s = np.exp(log_scales)
    M = Rs * s[:, None, :]
    sigma_w = M @ np.swapaxes(M, 1, 2)
    Xc = Xw @ Rv.T + tv
    sigma_c = Rv @ sigma_w @ Rv.T
    z = Xc[:, 2]
    valid = z > near
    zs = np.where(valid, z, 1.0)
    iz = 1.0 / zs
    n = len(X)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = K.fx * iz
    J[:, 0, 2] = -K.fx * Xc[:, 0] * iz * iz
    J[:, 1, 1] = K.fy * iz
    J[:, 1, 2] = -K.fy * Xc[:, 1] * iz * iz
    cov = J @ sigma_c @ np.swapaxes(J, 1, 2)
    cov[:, 0, 0] += DILATION
    cov[:, 1, 1] += DILATION
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    valid &= det > 0
    det = np.where(valid, det, 1.0)
    conic = np.stack([c / det, -b / det, a / det], axis=-1)
    mean2d = np.stack([K.fx * Xc[:, 0] * iz + K.cx, K.fy * Xc[:, 1] * iz + K.cy], axis=-1)
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = extent * np.sqrt(np.maximum(lam, 0.0))
    return Projected(valid, mean2d, conic, cov, z, radius, X, Xw, Xc, Rq, Rs, Rm, s,
                     np.asarray(quats, dtype=np.float64), sigma_w, sigma_c, J, Rv, K)


def project_backward(p: Projected, g_mean2d: np.ndarray, g_conic: np.ndarray) -> dict:
    """Chain screen-space gradients back to Gaussian, motion and view parameters."""
    K = p.K
    valid = p.valid
    g_mean2d = np.where(valid[:, None], g_mean2d, 0.0)
    g_conic = np.where(valid[:, None], g_conic, 0.0)
    n = len(p.X)
    # conic = inverse(cov); b appears twice in the quadratic form
    C = np.empty((n, 2, 2))
    C[:, 0, 0] = p.conic[:, 0]
    C[:, 0, 1] = C[:, 1, 0] = p.conic[:, 1]
    C[:, 1, 1] = p.conic[:, 2]
    gC = np.empty((n, 2, 2))
    gC[:, 0, 0] = g_conic[:, 0]
    gC[:, 0, 1] = gC[:, 1, 0] = 0.5 * g_conic[:, 1]
    gC[:, 1, 1] = g_conic[:, 2]
    g_cov = -C @ gC @ C
    J, Sc = p.J, p.sigma_c
    g_J = 2.0 * g_cov @ J @ Sc
    g_Sc = np.swapaxes(J, 1, 2) @ g_cov @ J
    Rv = p.Rv
    g_Sw = Rv.T @ g_Sc @ Rv
    g_Rv = np.sum(2.0 * g_Sc @ Rv @ p.sigma_w, axis=0)
    M = p.Rs * p.s[:, None, :]
    g_M = 2.0 * g_Sw @ M
    g_Rs = g_M * p.s[:, None, :]
    g_s = np.sum(g_M * p.Rs, axis=1)
    g_logs = g_s * p.s
    # camera-space mean
    x, y = p.Xc[:, 0], p.Xc[:, 1]
    iz = 1.0 / np.where(valid, p.Xc[:, 2], 1.0)
    iz2 = iz * iz
    iz3 = iz2 * iz
    g_Xc = np.zeros((n, 3))
    g_Xc[:, 0] = g_J[:, 0, 2] * (-K.fx * iz2) + g_mean2d[:, 0] * K.fx * iz
    g_Xc[:, 1] = g_J[:, 1, 2] * (-K.fy * iz2) + g_mean2d[:, 1] * K.fy * iz
    g_Xc[:, 2] = (g_J[:, 0, 0] * (-K.fx * iz2) + g_J[:, 0, 2] * (2.0 * K.fx * x * iz3)
                  + g_J[:, 1, 1] * (-K.fy * iz2) + g_J[:, 1, 2] * (2.0 * K.fy * y * iz3)
                  - g_mean2d[:, 0] * K.fx * x * iz2 - g_mean2d[:, 1] * K.fy * y * iz2)
    g_Xw = g_Xc @ Rv
    g_Rv = g_Rv + g_Xc.T @ p.Xw
    g_tv = g_Xc.sum(axis=0)
    out = {"view_R": g_Rv, "view_t": g_tv, "log_scales": g_logs}
    if p.Rm is not None:
        g_Rm = g_Rs @ np.swapaxes(p.Rq, 1, 2) + np.einsum("ni,nj->nij", g_Xw, p.X)
        g_Rq = np.swapaxes(p.Rm, 1, 2) @ g_Rs
        out["motion_R"] = g_Rm
        out["motion_t"] = g_Xw
        out["positions"] = np.einsum("nji,nj->ni", p.Rm, g_Xw)
    else:
        g_Rq = g_Rs
        out["positions"] = g_Xw
    out["quats"] = quat_backward(p.quats, g_Rq)
    return out


def project_gaussian(position, quat, log_scale, K: CameraIntrinsics, view: SE3Transform,
                     near: float = 0.01):
    """Single-Gaussian projection: ``(mean2d, cov2d, depth)``; raises ``Clipped`` behind the near plane."""
    p = project_gaussians(np.asarray(position, dtype=np.float64).reshape(1, 3),
                          np.asarray(quat, dtype=np.float64).reshape(1, 4),
                          np.asarray(log_scale, dtype=np.float64).reshape(1, 3),
                          K, view.rotation, view.translation, near)
    if not p.valid[0]:
        raise Clipped(f"Gaussian at depth {p.depth[0]:.4g} is behind the near plane {near}")
    return p.mean2d[0], p.cov2d[0], float(p.depth[0])
