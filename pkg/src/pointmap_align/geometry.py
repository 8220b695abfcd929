"""Rigid-body and pinhole-projection primitives.

Poses map camera coordinates to a parent frame: ``x_parent = R @ x_cam + t``.
Pixel ``(u, v)`` sits at integer coordinates with ``u`` in ``[0, W)`` and ``v`` in
``[0, H)``; the principal point is the image centre ``(W/2, H/2)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, InvalidInputError

_ORTHO_TOL = 1e-9


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix ``[v]_x`` so that ``skew(v) @ a == np.cross(v, a)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])


def so3_exp(axis_angle) -> np.ndarray:
    """Rodrigues' formula. Accepts a 3-vector or a stack of shape ``(..., 3)``."""
    w = np.asarray(axis_angle, dtype=float)
    if w.ndim > 1:
        return np.stack([so3_exp(x) for x in w.reshape(-1, 3)]).reshape(w.shape[:-1] + (3, 3))
    theta2 = float(w @ w)
    theta = np.sqrt(theta2)
    if theta < 1e-5:
        # series of sin(t)/t and (1-cos(t))/t^2, accurate to double precision here
        a = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0
        b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    k = skew(w)
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(rotation) -> np.ndarray:
    """Inverse of :func:`so3_exp` returning an axis-angle vector with angle in ``[0, pi]``.

    At exactly ``pi`` the axis sign is ambiguous; the axis is then chosen so that
    its largest-magnitude component is positive.
    """
    r = np.asarray(rotation, dtype=float)
    v = _vee(r)
    sin_t = 0.5 * np.linalg.norm(v)
    cos_t = 0.5 * (np.trace(r) - 1.0)
    theta = np.arctan2(sin_t, cos_t)
    if theta < 1e-5:
        return 0.5 * (1.0 + theta * theta / 6.0) * v
    if theta < 2.5:
        return theta / (2.0 * sin_t) * v
    # near pi the antisymmetric part vanishes; recover the axis from the symmetric part
    aat = (0.5 * (r + r.T) - cos_t * np.eye(3)) / (1.0 - cos_t)
    k = int(np.argmax(np.diag(aat)))
    axis = aat[:, k] / np.sqrt(aat[k, k])
    axis /= np.linalg.norm(axis)
    direction = axis @ v
    if abs(direction) > 1e-14:
        if direction < 0:
            axis = -axis
    elif axis[np.argmax(np.abs(axis))] < 0:
        axis = -axis
    return theta * axis


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform ``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        if r.shape != (3, 3):
            raise InvalidInputError(f"rotation must be 3x3, got {r.shape}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise InvalidInputError("pose contains non-finite values")
        if np.abs(r.T @ r - np.eye(3)).max() > _ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise InvalidInputError("rotation is not a proper orthonormal matrix")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "PoseSE3":
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise InvalidInputError(f"expected a 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """``self ∘ other``: apply ``other`` first."""
        return PoseSE3(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform points of shape ``(..., 3)``."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return self.compose(other)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Square-pixel pinhole camera with the principal point at the image centre."""

    focal: float
    width: int
    height: int

    def __post_init__(self):
        if not (np.isfinite(self.focal) and self.focal > 0):
            raise InvalidInputError(f"focal must be positive, got {self.focal}")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise InvalidInputError("image size must be positive")

    @property
    def principal_point(self) -> tuple[float, float]:
        return self.width / 2.0, self.height / 2.0

    def matrix(self) -> np.ndarray:
        cx, cy = self.principal_point
        return np.array([[self.focal, 0.0, cx], [0.0, self.focal, cy], [0.0, 0.0, 1.0]])


def centered_pixel_grid(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Re-centred pixel coordinates ``(u - W/2, v - H/2)``, each of shape ``(H, W)``."""
    u, v = np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))
    return u - width / 2.0, v - height / 2.0


def camera_rays(focal: float, width: int, height: int) -> np.ndarray:
    """Per-pixel ``K^-1 (u, v, 1)``: unit-depth points of shape ``(H, W, 3)``."""
    uc, vc = centered_pixel_grid(width, height)
    return np.stack([uc / focal, vc / focal, np.ones_like(uc)], axis=-1)


def back_project(depth, intr: CameraIntrinsics, pose: PoseSE3 | None = None) -> np.ndarray:
    """Lift a depth map to 3-D points in the pose's parent frame.

    Parameters
    ----------
    depth : (H, W) array
        Positive z-depth per pixel.
    intr : CameraIntrinsics
    pose : PoseSE3, optional
        Camera-to-parent transform; identity when omitted.

    Returns
    -------
    (H, W, 3) array of ``pose.apply(depth * K^-1 (u, v, 1))``.
    """
    d = np.asarray(depth, dtype=float)
    if d.shape != (intr.height, intr.width):
        raise InvalidInputError(f"depth shape {d.shape} does not match image size {(intr.height, intr.width)}")
    pts = d[..., None] * camera_rays(intr.focal, intr.width, intr.height)
    return pts if pose is None else pose.apply(pts)


def project(points, intr: CameraIntrinsics, pose: PoseSE3 | None = None):
    """Project parent-frame points into the camera; returns ``(u, v, depth)``."""
    p = np.asarray(points, dtype=float)
    if pose is not None:
        p = pose.inverse().apply(p)
    z = p[..., 2]
    cx, cy = intr.principal_point
    return intr.focal * p[..., 0] / z + cx, intr.focal * p[..., 1] / z + cy, z


def look_at(eye, target, up=(0.0, 0.0, -1.0)) -> PoseSE3:
    """Camera-to-world pose at ``eye`` whose +z axis points at ``target`` (x right, y down)."""
    eye = np.asarray(eye, dtype=float)
    fwd = np.asarray(target, dtype=float) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=float))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, [1.0, 0.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return PoseSE3(np.stack([right, down, fwd], axis=1), eye)


def umeyama(src, dst, weights=None, with_scale: bool = True):
    """Weighted least-squares similarity fit ``dst ≈ s * R @ src + t``.

    Parameters
    ----------
    src, dst : (M, 3) arrays
    weights : (M,) non-negative array, optional
    with_scale : bool
        Fix ``s = 1`` when False.

    Returns
    -------
    (R, t, s)

    Raises
    ------
    DegenerateInputError
        Fewer than three positively weighted points, or collinear support.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    keep = w > 0
    if keep.sum() < 3:
        raise DegenerateInputError(f"need at least 3 weighted points, got {int(keep.sum())}")
    src, dst, w = src[keep], dst[keep], w[keep]
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    xs = src - mu_s
    xd = dst - mu_d
    var_s = float(w @ (xs * xs).sum(axis=1))
    sv = np.linalg.svd(xs * np.sqrt(w)[:, None], compute_uv=False)
    if var_s <= 0 or sv[1] <= 1e-10 * sv[0]:
        raise DegenerateInputError("source points are collinear or coincident")
    cov = (xd * w[:, None]).T @ xs
    u, d, vt = np.linalg.svd(cov)
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2] = -1.0
    r = (u * sign) @ vt
    s = float((d * sign).sum() / var_s) if with_scale else 1.0
    t = mu_d - s * r @ mu_s
    return r, t, s


@dataclass(frozen=True)
class Sim3:
    """Similarity ``x -> scale * rotation @ x + translation``."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls) -> "Sim3":
        return cls(1.0, np.eye(3), np.zeros(3))

    def compose(self, other: "Sim3") -> "Sim3":
        return Sim3(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Sim3":
        rt = self.rotation.T
        return Sim3(1.0 / self.scale, rt, -rt @ self.translation / self.scale)

    def apply(self, points) -> np.ndarray:
        return self.scale * (np.asarray(points, dtype=float) @ self.rotation.T) + self.translation
