"""Rigid-body math, pinhole cameras and trajectory alignment.

Conventions
-----------
* A :class:`Pose` ``(R, t)`` maps points ``x -> R @ x + t``.  Camera poses
  stored in trajectories are camera-to-world.
* Tangent vectors are ordered ``[omega, upsilon]`` (rotation first).
* Updates are always applied on the left: ``exp(delta) * pose``.
* Pixel ``(u, v)`` is (column, row) with pixel centres on integer coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    AngleNearPi,
    BadIntrinsics,
    BehindCamera,
    DegenerateTrajectory,
    LengthMismatch,
    NonPositiveDepth,
)

SMALL_ANGLE = 1e-6
MIN_DEPTH = 1e-8


def hat(w):
    """Skew-symmetric matrix with ``hat(w) @ v == cross(w, v)``."""
    w = np.asarray(w, dtype=np.float64)
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )


def vee(m):
    return np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]]) * 0.5


def _exp_coeffs(theta):
    # A = sin/θ, B = (1-cos)/θ², C = (θ-sin)/θ³
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = math.sin(theta), math.cos(theta)
    return s / theta, (1.0 - c) / theta**2, (theta - s) / theta**3


def so3_exp(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    a, b, _ = _exp_coeffs(theta)
    k = hat(omega)
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(rotation) -> np.ndarray:
    rotation = np.asarray(rotation, dtype=np.float64)
    axis2 = vee(rotation) * 2.0  # = 2 sin(θ) * axis
    cos_t = np.clip((np.trace(rotation) - 1.0) * 0.5, -1.0, 1.0)
    sin_t = 0.5 * float(np.linalg.norm(axis2))
    theta = math.atan2(sin_t, cos_t)
    if math.pi - theta < 1e-6:
        raise AngleNearPi(f"rotation angle {theta:.9f} too close to pi")
    if theta < SMALL_ANGLE:
        return 0.5 * axis2 * (1.0 + theta * theta / 6.0)
    return axis2 * (theta / (2.0 * sin_t))


def rotation_angle(rotation) -> float:
    """Geodesic angle of a rotation matrix in radians, valid over [0, pi]."""
    rotation = np.asarray(rotation, dtype=np.float64)
    cos_t = np.clip((np.trace(rotation) - 1.0) * 0.5, -1.0, 1.0)
    sin_t = float(np.linalg.norm(vee(rotation)))
    return math.atan2(sin_t, cos_t)


@dataclass(frozen=True)
class Tangent:
    omega: np.ndarray
    upsilon: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=np.float64).reshape(3))
        object.__setattr__(self, "upsilon", np.asarray(self.upsilon, dtype=np.float64).reshape(3))
        if not (np.all(np.isfinite(self.omega)) and np.all(np.isfinite(self.upsilon))):
            raise ValueError("tangent entries must be finite")

    @classmethod
    def zero(cls) -> "Tangent":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, xi) -> "Tangent":
        xi = np.asarray(xi, dtype=np.float64).reshape(6)
        return cls(xi[:3], xi[3:])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.upsilon])

    def __neg__(self) -> "Tangent":
        return Tangent(-self.omega, -self.upsilon)

    def scaled(self, s: float) -> "Tangent":
        return Tangent(self.omega * s, self.upsilon * s)


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points) -> np.ndarray:
        """Transform an array of points with shape ``(..., 3)``."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def is_valid(self, tol: float = 1e-10) -> bool:
        r = self.rotation
        return (
            np.allclose(r.T @ r, np.eye(3), atol=tol)
            and abs(np.linalg.det(r) - 1.0) < tol
            and bool(np.all(np.isfinite(self.translation)))
        )


def se3_exp(xi: Tangent) -> Pose:
    theta = float(np.linalg.norm(xi.omega))
    a, b, c = _exp_coeffs(theta)
    k = hat(xi.omega)
    k2 = k @ k
    rotation = np.eye(3) + a * k + b * k2
    v = np.eye(3) + b * k + c * k2
    return Pose(rotation, v @ xi.upsilon)


def se3_log(p: Pose) -> Tangent:
    omega = so3_log(p.rotation)
    theta = float(np.linalg.norm(omega))
    k = hat(omega)
    if theta < SMALL_ANGLE:
        coeff = 1.0 / 12.0 + theta * theta / 720.0
    else:
        a, b, _ = _exp_coeffs(theta)
        coeff = (1.0 - a / (2.0 * b)) / (theta * theta)
    v_inv = np.eye(3) - 0.5 * k + coeff * (k @ k)
    return Tangent(omega, v_inv @ p.translation)


def apply_update(p: Pose, delta: Tangent) -> Pose:
    """Left-multiplicative update ``exp(delta) * p``."""
    return se3_exp(delta) @ p


def interpolate_pose(start: Pose, end: Pose, s: float) -> Pose:
    """Point at fraction ``s`` along the left geodesic from ``start`` to ``end``."""
    xi = se3_log(end @ start.inverse())
    return apply_update(start, xi.scaled(s))


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise BadIntrinsics(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise BadIntrinsics(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}"
            )

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "Camera":
        """Camera for an image downsampled by ``factor`` with block averaging."""
        w = int(self.width // factor)
        h = int(self.height // factor)
        return Camera(
            self.fx / factor,
            self.fy / factor,
            (self.cx + 0.5) / factor - 0.5,
            (self.cy + 0.5) / factor - 0.5,
            w,
            h,
        )

    def pixel_grid(self) -> np.ndarray:
        """All pixel centres in row-major order as an ``(H*W, 2)`` array."""
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([u.ravel(), v.ravel()], axis=-1).astype(np.float64)

    def in_bounds(self, pixels, margin: float = 0.0) -> np.ndarray:
        pixels = np.asarray(pixels)
        u, v = pixels[..., 0], pixels[..., 1]
        return (
            (u >= margin)
            & (u <= self.width - 1 - margin)
            & (v >= margin)
            & (v <= self.height - 1 - margin)
        )


def project_points(cam: Camera, points):
    """Vectorised projection; returns ``(pixels, valid)`` where invalid means
    the point is not in front of the camera."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    valid = z > MIN_DEPTH
    zs = np.where(valid, z, 1.0)
    u = cam.fx * points[..., 0] / zs + cam.cx
    v = cam.fy * points[..., 1] / zs + cam.cy
    return np.stack([u, v], axis=-1), valid


def project(cam: Camera, point) -> np.ndarray:
    point = np.asarray(point, dtype=np.float64)
    if not point[2] > MIN_DEPTH:
        raise BehindCamera(f"point z={point[2]} is not in front of the camera")
    pix, _ = project_points(cam, point)
    return pix


def backproject_points(cam: Camera, pixels, depth) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = (pixels[..., 0] - cam.cx) / cam.fx * depth
    y = (pixels[..., 1] - cam.cy) / cam.fy * depth
    return np.stack([x, y, depth * np.ones_like(x)], axis=-1)


def backproject(cam: Camera, pixel, depth: float) -> np.ndarray:
    if not depth > 0:
        raise NonPositiveDepth(f"depth must be positive, got {depth}")
    return backproject_points(cam, pixel, depth)


def pixel_directions(cam: Camera, pixels) -> np.ndarray:
    """Unnormalised camera-frame directions with unit z."""
    pixels = np.asarray(pixels, dtype=np.float64)
    return backproject_points(cam, pixels, np.ones(pixels.shape[:-1]))


# ---------------------------------------------------------------------------
# trajectory alignment


@dataclass(frozen=True)
class Similarity:
    """``x -> scale * rotation @ x + translation``."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ self.rotation.T + self.translation

    def inverse(self) -> "Similarity":
        rt = self.rotation.T
        return Similarity(1.0 / self.scale, rt, -(rt @ self.translation) / self.scale)

    def apply_pose(self, p: Pose) -> Pose:
        """Move a camera-to-world pose into the transformed world frame."""
        return Pose(self.rotation @ p.rotation, self.apply(p.translation))


def umeyama(src, dst, with_scale: bool = True) -> Similarity:
    """Least-squares similarity with ``dst ~ s R src + t``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    n = src.shape[0]
    cov = xd.T @ xs / n
    u, d, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    rot = u @ s @ vt
    var_s = float((xs**2).sum() / n)
    scale = float(np.trace(np.diag(d) @ s) / var_s) if with_scale else 1.0
    return Similarity(scale, rot, mu_d - scale * rot @ mu_s)


def _check_spread(positions, name):
    centred = positions - positions.mean(0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[0] < 1e-12 or sv[1] < 1e-9 * max(sv[0], 1.0):
        raise DegenerateTrajectory(f"{name} positions are identical or collinear")


def align_trajectories(est: Sequence[Pose], gt: Sequence[Pose]):
    """Umeyama similarity alignment of trajectory positions.

    Returns ``(gauge, aligned)`` where ``gauge`` maps ground-truth coordinates
    into the estimate's frame (so an estimate that is ``2 * gt`` reports
    ``gauge.scale == 2``) and ``aligned`` is the estimate expressed in the
    ground-truth frame.
    """
    if len(est) != len(gt):
        raise LengthMismatch(f"{len(est)} estimated vs {len(gt)} ground-truth poses")
    if len(est) < 3:
        raise DegenerateTrajectory("need at least 3 poses to align")
    pe = np.array([p.translation for p in est])
    pg = np.array([p.translation for p in gt])
    _check_spread(pe, "estimated")
    _check_spread(pg, "ground-truth")
    to_gt = umeyama(pe, pg)
    aligned = [to_gt.apply_pose(p) for p in est]
    return to_gt.inverse(), aligned
