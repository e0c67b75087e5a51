"""Rigid-motion and pinhole-camera primitives.

Rotations that get optimized are stored in the continuous 6D form (the first
two columns of the rotation matrix, orthonormalized on use).  Twists are
ordered ``(rho, phi)``: translational part first, rotational part second.

Most functions accept a single item or a leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, DegenerateRotation, NearPiRotation

_EPS_DEGEN = 1e-12
PI_MARGIN = 1e-6
MIN_DEPTH = 1e-6


# ---------------------------------------------------------------------------
# 6D rotations
# ---------------------------------------------------------------------------

def rot6d_to_matrix(r: np.ndarray) -> np.ndarray:
    """Gram-Schmidt a ``(..., 6)`` array into ``(..., 3, 3)`` rotation matrices."""
    r = np.asarray(r, dtype=np.float64)
    a1, a2 = r[..., :3], r[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1)
    if np.any(n1 <= _EPS_DEGEN):
        raise DegenerateRotation("first 6D column has (near) zero length")
    b1 = a1 / n1[..., None]
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1)
    if np.any(n2 <= _EPS_DEGEN * np.maximum(1.0, np.linalg.norm(a2, axis=-1))):
        raise DegenerateRotation("6D columns are parallel")
    b2 = u2 / n2[..., None]
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def rot6d_backward(r: np.ndarray, grad_R: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. the rotation matrix back onto the 6D parameters."""
    r = np.asarray(r, dtype=np.float64)
    a1, a2 = r[..., :3], r[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    b1 = a1 / n1
    d12 = np.sum(b1 * a2, axis=-1, keepdims=True)
    u2 = a2 - d12 * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    b2 = u2 / n2

    g1, g2, g3 = grad_R[..., :, 0], grad_R[..., :, 1], grad_R[..., :, 2]
    # b3 = b1 x b2
    gb1 = g1 + np.cross(b2, g3)
    gb2 = g2 + np.cross(g3, b1)
    gu2 = (gb2 - b2 * np.sum(b2 * gb2, axis=-1, keepdims=True)) / n2
    ga2 = gu2 - b1 * np.sum(b1 * gu2, axis=-1, keepdims=True)
    gb1 = gb1 - (d12 * gu2 + np.sum(gu2 * b1, axis=-1, keepdims=True) * a2)
    ga1 = (gb1 - b1 * np.sum(b1 * gb1, axis=-1, keepdims=True)) / n1
    return np.concatenate([ga1, ga2], axis=-1)


def matrix_to_rot6d(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def normalize_rot6d(r: np.ndarray) -> np.ndarray:
    """Re-read the first two columns after orthonormalization."""
    return matrix_to_rot6d(rot6d_to_matrix(r))


# ---------------------------------------------------------------------------
# SO(3) / SE(3) exponential and logarithm (batched)
# ---------------------------------------------------------------------------

def hat(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def _rodrigues_coeffs(theta: np.ndarray):
    """sin(t)/t, (1-cos t)/t^2, (t - sin t)/t^3 with series near zero."""
    small = theta < 1e-4
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    A = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(t) / t)
    B = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(t)) / (t * t))
    C = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (t - np.sin(t)) / (t ** 3))
    return A, B, C


def se3_exp_batch(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Twists ``(..., 6)`` to ``(R, t)``."""
    xi = np.asarray(xi, dtype=np.float64)
    rho, phi = xi[..., :3], xi[..., 3:]
    theta = np.linalg.norm(phi, axis=-1)
    A, B, C = _rodrigues_coeffs(theta)
    W = hat(phi)
    W2 = W @ W
    eye = np.eye(3)
    R = eye + A[..., None, None] * W + B[..., None, None] * W2
    V = eye + B[..., None, None] * W + C[..., None, None] * W2
    t = np.einsum("...ij,...j->...i", V, rho)
    return R, t


def se3_log_batch(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    skew = np.stack([R[..., 2, 1] - R[..., 1, 2],
                     R[..., 0, 2] - R[..., 2, 0],
                     R[..., 1, 0] - R[..., 0, 1]], axis=-1)
    s = 0.5 * np.linalg.norm(skew, axis=-1)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(s, c)
    if np.any(theta >= np.pi - PI_MARGIN):
        raise NearPiRotation(f"rotation angle {float(np.max(theta)):.9f} too close to pi")
    small = theta < 1e-4
    ts = np.where(small, 1.0, theta)
    factor = np.where(small, 0.5 + theta ** 2 / 12.0, ts / (2.0 * np.where(small, 1.0, np.sin(ts))))
    phi = factor[..., None] * skew
    W = hat(phi)
    A, B, _ = _rodrigues_coeffs(theta)
    coef = np.where(small, 1.0 / 12.0 + theta ** 2 / 720.0,
                    (1.0 - A / (2.0 * np.where(small, 1.0, B))) / (ts * ts))
    Vinv = np.eye(3) - 0.5 * W + coef[..., None, None] * (W @ W)
    rho = np.einsum("...ij,...j->...i", Vinv, t)
    return np.concatenate([rho, phi], axis=-1)


# ---------------------------------------------------------------------------
# SE3Transform
# ---------------------------------------------------------------------------

_IDENTITY6 = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


@dataclass(frozen=True)
class SE3Transform:
    """Rigid motion ``p -> R p + t`` with ``R`` kept in 6D form."""

    rot6: np.ndarray = field(default_factory=lambda: _IDENTITY6.copy())
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rot6", np.asarray(self.rot6, dtype=np.float64).reshape(6))
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "SE3Transform":
        return cls()

    @classmethod
    def from_matrix(cls, R, t=(0.0, 0.0, 0.0)) -> "SE3Transform":
        return cls(matrix_to_rot6d(np.asarray(R, dtype=np.float64)), np.asarray(t, dtype=np.float64))

    @classmethod
    def from_twist(cls, xi) -> "SE3Transform":
        return se3_exp(xi)

    @property
    def rotation(self) -> np.ndarray:
        return rot6d_to_matrix(self.rot6)

    def matrix4(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, p):
        return se3_apply(self, p)

    def inverse(self) -> "SE3Transform":
        return se3_inverse(self)

    def __matmul__(self, other: "SE3Transform") -> "SE3Transform":
        return se3_compose(self, other)

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SE3Transform":
        return cls.from_matrix(np.asarray(d["rotation"], dtype=np.float64), d["translation"])


def se3_compose(a: SE3Transform, b: SE3Transform) -> SE3Transform:
    """Apply ``b`` first, then ``a``."""
    Ra, Rb = a.rotation, b.rotation
    return SE3Transform.from_matrix(Ra @ Rb, Ra @ b.translation + a.translation)


def se3_inverse(a: SE3Transform) -> SE3Transform:
    R = a.rotation
    return SE3Transform.from_matrix(R.T, -R.T @ a.translation)


def se3_apply(a: SE3Transform, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return p @ a.rotation.T + a.translation


def se3_exp(xi) -> SE3Transform:
    R, t = se3_exp_batch(np.asarray(xi, dtype=np.float64).reshape(6))
    return SE3Transform.from_matrix(R, t)


def se3_log(T: SE3Transform) -> np.ndarray:
    return se3_log_batch(T.rotation, T.translation)


def se3_interpolate(T: SE3Transform, ratio: float) -> SE3Transform:
    """Screw-path interpolation ``exp(ratio * log T)``."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    return se3_exp(ratio * se3_log(T))


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, radians."""
    c = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    skew = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(0.5 * np.linalg.norm(skew), c))


def pose_errors(est: SE3Transform, gt: SE3Transform) -> tuple[float, float]:
    """(rotation error in degrees, translation error in scene units)."""
    dR = est.rotation @ gt.rotation.T
    return np.degrees(rotation_angle(dR)), float(np.linalg.norm(est.translation - gt.translation))


# ---------------------------------------------------------------------------
# Quaternions (Gaussian shape rotations), (w, x, y, z) order
# ---------------------------------------------------------------------------

def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(q.shape[:-1] + (3, 3))


def quat_backward(q: np.ndarray, grad_R: np.ndarray) -> np.ndarray:
    """Gradient of ``quat_to_matrix`` w.r.t. the raw (unnormalized) quaternion."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / n
    w, x, y, z = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
    g = grad_R
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    gu = np.stack([gw, gx, gy, gz], axis=-1)
    return (gu - u * np.sum(u * gu, axis=-1, keepdims=True)) / n


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrices to unit quaternions with non-negative w."""
    R = np.asarray(R, dtype=np.float64)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for i, M in enumerate(flat):
        tr = np.trace(M)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (M[2, 1] - M[1, 2]) / s, (M[0, 2] - M[2, 0]) / s, (M[1, 0] - M[0, 1]) / s]
        elif M[0, 0] > M[1, 1] and M[0, 0] > M[2, 2]:
            s = 2.0 * np.sqrt(1.0 + M[0, 0] - M[1, 1] - M[2, 2])
            q = [(M[2, 1] - M[1, 2]) / s, 0.25 * s, (M[0, 1] + M[1, 0]) / s, (M[0, 2] + M[2, 0]) / s]
        elif M[1, 1] > M[2, 2]:
            s = 2.0 * np.sqrt(1.0 + M[1, 1] - M[0, 0] - M[2, 2])
            q = [(M[0, 2] - M[2, 0]) / s, (M[0, 1] + M[1, 0]) / s, 0.25 * s, (M[1, 2] + M[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + M[2, 2] - M[0, 0] - M[1, 1])
            q = [(M[1, 0] - M[0, 1]) / s, (M[0, 2] + M[2, 0]) / s, (M[1, 2] + M[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        out[i] = q if q[0] >= 0 else -q
    return out.reshape(R.shape[:-2] + (4,))


# ---------------------------------------------------------------------------
# Pinhole camera
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))

    def pixel_grid(self) -> np.ndarray:
        """``(H, W, 2)`` array of integer pixel coordinates ``(u, v)``."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return np.stack([u, v], axis=-1)


def project(K: CameraIntrinsics, P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    z = P[..., 2]
    if np.any(z <= MIN_DEPTH):
        raise BehindCamera("point has non-positive depth")
    return np.stack([K.fx * P[..., 0] / z + K.cx, K.fy * P[..., 1] / z + K.cy], axis=-1)


def pixel_rays(K: CameraIntrinsics, p) -> np.ndarray:
    """``K^-1 [u, v, 1]`` for pixels ``(..., 2)``."""
    p = np.asarray(p, dtype=np.float64)
    return np.stack([(p[..., 0] - K.cx) / K.fx, (p[..., 1] - K.cy) / K.fy,
                     np.ones(p.shape[:-1])], axis=-1)


def unproject(K: CameraIntrinsics, p, d) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("depth must be positive")
    return pixel_rays(K, p) * d[..., None]
