"""Feature-metric pose alignment between consecutive frames.

Each image becomes a pyramid of (grey, d/du, d/dv) feature maps with a
texture confidence.  The relative pose of frame ``b`` is refined by damped
Gauss-Newton (Levenberg-Marquardt) on Huber-robust feature residuals, from
the coarsest level to the finest.  Poses passed to :func:`align` are
world-to-camera transforms of frame ``b`` and updates are left-multiplied.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter, median_filter, minimum_filter

from .errors import Diverged, ImageTooSmall, NoValidPoints, SingularSystem
from .geometry import Camera, Pose, Tangent, apply_update, backproject_points, hat, project_points

logger = logging.getLogger(__name__)

MIN_LEVEL_SIZE = 8


def to_gray(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image[..., :3] @ np.array([0.299, 0.587, 0.114])


@dataclass
class FeaturePyramid:
    """``features[l-1]`` is level ``l`` with shape (H_l, W_l, D); level 1 is
    full resolution."""

    features: list
    confidence: list

    @property
    def n_levels(self) -> int:
        return len(self.features)

    def level(self, l: int):
        return self.features[l - 1], self.confidence[l - 1]


def _downsample(img):
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def build_pyramid(image, levels: int = 3, k: float = 10.0, tau: float = 0.05, blur: float = 1.0) -> FeaturePyramid:
    gray = to_gray(image)
    if gray.size == 0:
        raise ImageTooSmall("empty image")
    if levels < 1:
        raise ValueError("need at least one level")
    smallest = min(gray.shape) // 2 ** (levels - 1)
    if smallest < MIN_LEVEL_SIZE:
        raise ImageTooSmall(
            f"{gray.shape[1]}x{gray.shape[0]} image is too small for {levels} levels"
        )
    feats, confs = [], []
    g = gaussian_filter(gray, blur, mode="nearest")
    for l in range(levels):
        if l > 0:
            g = _downsample(gaussian_filter(g, blur, mode="nearest"))
        gv, gu = np.gradient(g)
        feats.append(np.stack([g, gu, gv], axis=-1))
        mag = np.hypot(gu, gv)
        confs.append(1.0 / (1.0 + np.exp(-k * (mag - tau))))
    return FeaturePyramid(feats, confs)


def bilinear(fmap, uv, with_grad: bool = False):
    """Sample ``fmap`` (H, W[, D]) at pixel coordinates ``uv`` (N, 2).

    Returns values and, when asked, the exact partial derivatives of the
    bilinear interpolant along u and v.  Out-of-range points are clamped;
    callers mask them.
    """
    squeeze = fmap.ndim == 2
    if squeeze:
        fmap = fmap[..., None]
    H, W = fmap.shape[:2]
    u = np.clip(uv[:, 0], 0.0, W - 1)
    v = np.clip(uv[:, 1], 0.0, H - 1)
    u0 = np.clip(np.floor(u).astype(int), 0, W - 2)
    v0 = np.clip(np.floor(v).astype(int), 0, H - 2)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    f00 = fmap[v0, u0]
    f01 = fmap[v0, u0 + 1]
    f10 = fmap[v0 + 1, u0]
    f11 = fmap[v0 + 1, u0 + 1]
    val = f00 * (1 - fu) * (1 - fv) + f01 * fu * (1 - fv) + f10 * (1 - fu) * fv + f11 * fu * fv
    if squeeze:
        val = val[:, 0]
    if not with_grad:
        return val
    du = (f01 - f00) * (1 - fv) + (f11 - f10) * fv
    dv = (f10 - f00) * (1 - fu) + (f11 - f01) * fu
    if squeeze:
        du, dv = du[:, 0], dv[:, 0]
    return val, du, dv


@dataclass
class Correspondences:
    points: np.ndarray  # (N, 3) world
    pixels_a: np.ndarray  # (N, 2) full-resolution pixels in frame a
    valid: np.ndarray  # (N,)


def depth_edges(depth, radius: int = 4, rel: float = 0.15) -> np.ndarray:
    """Mask of pixels within ``radius`` of a depth discontinuity, judged by
    the relative depth range of a median-smoothed map."""
    d = np.where(np.isfinite(depth) & (depth > 0), depth, 0.0)
    d = median_filter(d, size=3, mode="nearest")
    size = 2 * radius + 1
    hi = maximum_filter(d, size=size, mode="nearest")
    lo = minimum_filter(d, size=size, mode="nearest")
    return (hi - lo) > rel * np.maximum(lo, 1e-12)


def make_correspondences(cam: Camera, pose_a: Pose, depth_a, stride: int = 8,
                         edge_radius: int = 4, edge_rel: float = 0.15) -> Correspondences:
    """Back-project a sparse pixel grid of frame ``a`` (camera-to-world
    ``pose_a``) with its depth map.

    Points near depth discontinuities are dropped: their blurred features mix
    foreground and background and they are the first to be occluded.
    """
    depth_a = np.asarray(depth_a, dtype=np.float64)
    off = stride // 2
    v, u = np.mgrid[off : cam.height : stride, off : cam.width : stride]
    pix = np.stack([u.ravel(), v.ravel()], axis=-1).astype(np.float64)
    d = depth_a[v.ravel(), u.ravel()]
    valid = np.isfinite(d) & (d > 0)
    if edge_radius > 0:
        valid &= ~depth_edges(depth_a, edge_radius, edge_rel)[v.ravel(), u.ravel()]
    pts_c = backproject_points(cam, pix, np.where(valid, d, 1.0))
    return Correspondences(pose_a.apply(pts_c), pix, valid)


def level_coords(uv, level: int):
    s = 2.0 ** (level - 1)
    return (uv + 0.5) / s - 0.5


BORDER = 2.0


def _inside(uv, W, H, m):
    return (uv[:, 0] >= m) & (uv[:, 0] <= W - 1 - m) & (uv[:, 1] >= m) & (uv[:, 1] <= H - 1 - m)


@dataclass
class Residuals:
    r: np.ndarray  # (N, D)
    weights: np.ndarray  # (N,) confidence products
    valid: np.ndarray  # (N,)
    jac: np.ndarray | None = None  # (N, D, 6)


def feature_residual(pyr_a, pyr_b, corr: Correspondences, pose: Pose, level: int, cam: Camera,
                     with_jacobian: bool = False, margin: float | None = None) -> Residuals:
    fa, ca = pyr_a.level(level)
    fb, cb = pyr_b.level(level)
    cam_l = cam.scaled(2.0 ** (level - 1))
    Hb, Wb = fb.shape[:2]
    Xb = pose.apply(corr.points)
    uv_b, front = project_points(cam_l, Xb)
    uv_a = level_coords(corr.pixels_a, level)
    Ha, Wa = fa.shape[:2]
    # blur and one-sided gradients near the border are not view consistent; the
    # band is BORDER px at full resolution and shrinks with the level (>= 1 px)
    if margin is None:
        margin = max(BORDER / 2.0 ** (level - 1), 1.0)
    valid = corr.valid & front & _inside(uv_b, Wb, Hb, margin) & _inside(uv_a, Wa, Ha, margin)
    if with_jacobian:
        vb, du, dv = bilinear(fb, uv_b, with_grad=True)
    else:
        vb = bilinear(fb, uv_b)
    r = vb - bilinear(fa, uv_a)
    w = bilinear(cb, uv_b) * bilinear(ca, uv_a)
    r = np.where(valid[:, None], r, 0.0)
    w = np.where(valid, w, 0.0)
    jac = None
    if with_jacobian:
        x, y = Xb[:, 0], Xb[:, 1]
        z = np.where(front, Xb[:, 2], 1.0)
        N = Xb.shape[0]
        dpi = np.zeros((N, 2, 3))
        dpi[:, 0, 0] = cam_l.fx / z
        dpi[:, 0, 2] = -cam_l.fx * x / z**2
        dpi[:, 1, 1] = cam_l.fy / z
        dpi[:, 1, 2] = -cam_l.fy * y / z**2
        dX = np.zeros((N, 3, 6))
        dX[:, :, :3] = -np.array([hat(p) for p in Xb]) if N else dX[:, :, :3]
        dX[:, :, 3:] = np.eye(3)
        dF = np.stack([du, dv], axis=-1)  # (N, D, 2)
        jac = np.einsum("ndk,nkj,nje->nde", dF, dpi, dX)
        jac = np.where(valid[:, None, None], jac, 0.0)
    return Residuals(r, w, valid, jac)


def huber_rho(s, c: float = 1.0):
    """Robust cost on squared norms: ``s`` below ``c``, ``2 sqrt(c s) - c`` above.
    Returns ``(rho, rho_prime)``."""
    s = np.asarray(s, dtype=np.float64)
    quad = s <= c
    ss = np.where(quad, 1.0, s)
    rho = np.where(quad, s, 2.0 * np.sqrt(c * ss) - c)
    drho = np.where(quad, 1.0, np.sqrt(c / ss))
    return rho, drho


def robust_total_error(residuals, weights, c: float = 1.0):
    r = np.asarray(residuals, dtype=np.float64)
    if r.ndim == 1:
        r = r[:, None]
    s = np.sum(r * r, axis=-1)
    rho, drho = huber_rho(s, c)
    return float(np.sum(np.asarray(weights) * rho)), drho


def lm_step(residuals, jacobians, weights, lam: float) -> np.ndarray:
    """Damped normal equations ``-(H + lam diag H)^-1 J^T W r``.

    ``residuals`` (N, D), ``jacobians`` (N, D, k) and per-row weights (N,)
    that already include robust and confidence factors.
    """
    r = np.asarray(residuals, dtype=np.float64)
    J = np.asarray(jacobians, dtype=np.float64)
    if r.ndim == 1:
        r = r[:, None]
    if J.ndim == 2:
        J = J[:, None, :]
    w = np.asarray(weights, dtype=np.float64)
    H = np.einsum("n,ndi,ndj->ij", w, J, J)
    g = np.einsum("n,ndi,nd->i", w, J, r)
    A = H + lam * np.diag(np.diag(H))
    cond = np.linalg.cond(A) if np.all(np.isfinite(A)) else np.inf
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularSystem(f"damped system is singular (cond={cond:.3g})")
    return -np.linalg.solve(A, g)


@dataclass
class AlignSchedule:
    max_iters: int = 50
    lambda0: float = 1e-3
    huber: float = 1.0
    tol: float = 1e-8
    max_rejects: int = 10
    levels: tuple | None = None  # None means coarsest..finest of the pyramid


@dataclass
class AlignDiagnostics:
    records: list = field(default_factory=list)
    status: str = "ok"
    initial_error: float = float("nan")
    final_error: float = float("nan")
    level_poses: list = field(default_factory=list)

    def log(self, **rec):
        self.records.append(rec)

    def to_text(self) -> str:
        return json.dumps(
            {
                "status": self.status,
                "initial_error": self.initial_error,
                "final_error": self.final_error,
                "records": self.records,
            }
        )


def _robust_error(res: Residuals, c, mask):
    s = np.sum(res.r**2, axis=-1)
    rho, drho = huber_rho(s, c)
    return float(np.sum(np.where(mask, res.weights * rho, 0.0))), drho


def align(pyr_a, pyr_b, corr: Correspondences, init_pose: Pose, cam: Camera,
          schedule: AlignSchedule | None = None):
    """Coarse-to-fine LM alignment; returns ``(pose, diagnostics)``."""
    sch = schedule or AlignSchedule()
    levels = sch.levels or tuple(range(pyr_a.n_levels, 0, -1))
    diag = AlignDiagnostics()
    pose = init_pose
    any_accepted = False
    finest = levels[-1]
    start_res = feature_residual(pyr_a, pyr_b, corr, init_pose, finest, cam)
    for level in levels:
        lam = sch.lambda0
        rejects = 0
        res = feature_residual(pyr_a, pyr_b, corr, pose, level, cam, with_jacobian=True)
        err, drho = _robust_error(res, sch.huber, res.valid)
        diag.log(level=level, iteration=0, lam=lam, error=err, accepted=True)
        for it in range(1, sch.max_iters + 1):
            if not res.valid.any():
                diag.status = "no_valid_points"
                break
            w = res.weights * drho
            delta = lm_step(res.r[res.valid], res.jac[res.valid], w[res.valid], lam)
            cand = apply_update(pose, Tangent.from_vector(delta))
            cres = feature_residual(pyr_a, pyr_b, corr, cand, level, cam, with_jacobian=True)
            common = res.valid & cres.valid
            cur_e, _ = _robust_error(res, sch.huber, common)
            new_e, new_drho = _robust_error(cres, sch.huber, common)
            accepted = new_e < cur_e
            if accepted:
                pose, res, drho = cand, cres, new_drho
                err, _ = _robust_error(res, sch.huber, res.valid)
                lam /= 10.0
                rejects = 0
                any_accepted = True
            else:
                lam *= 10.0
                rejects += 1
            # both errors are on the points valid before and after the step
            diag.log(level=level, iteration=it, lam=lam, error=new_e if accepted else cur_e,
                     prev_error=cur_e, accepted=bool(accepted), step=float(np.linalg.norm(delta)))
            if np.linalg.norm(delta) < sch.tol:
                break
            if rejects >= sch.max_rejects:
                if not any_accepted:
                    diag.status = "diverged"
                    raise Diverged(f"{rejects} consecutive rejected steps at level {level}")
                break
        diag.level_poses.append(pose)
    end_res = feature_residual(pyr_a, pyr_b, corr, pose, finest, cam)
    common = start_res.valid & end_res.valid
    e0, _ = _robust_error(start_res, sch.huber, common)
    e1, _ = _robust_error(end_res, sch.huber, common)
    diag.initial_error, diag.final_error = e0, e1
    if e1 > e0:
        diag.status = "reverted"
        pose = init_pose
        diag.final_error = e0
    logger.debug("align %s", diag.to_text())
    return pose, diag


def huber(x, gamma: float = 1.0):
    """Standard Huber penalty on magnitudes."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    return np.where(x <= gamma, 0.5 * x * x, gamma * (x - 0.5 * gamma))


def fba_loss(level_poses, gt_pose: Pose, points, cam: Camera, gamma: float = 1.0) -> float:
    """Mean over levels of summed Huber reprojection distances between each
    level's estimate and the reference pose (both world-to-camera)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    ref, ok_ref = project_points(cam, gt_pose.apply(points))
    total = 0.0
    used = 0
    for p in level_poses:
        est, ok = project_points(cam, p.apply(points))
        m = ok & ok_ref
        if not m.any():
            continue
        used += 1
        total += float(huber(np.linalg.norm(est[m] - ref[m], axis=-1), gamma).sum())
    if used == 0:
        raise NoValidPoints("no point projects in front of both cameras")
    return total / len(level_poses)
