"""Training objective: photometric, normalised-depth and flow-consistency terms.

Every loss returns a scalar; the ``*_grad`` companions return the gradient
with respect to the first (rendered / predicted) argument so the optimiser
can chain it through the renderer.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import NoValidPixels, NonFiniteComponent, ShapeMismatch, TooFewSamples
from .geometry import Camera, Pose, backproject_points, project_points

DEPTH_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    photometric: float = 0.25
    depth: float = 0.1
    fba: float = 1.0
    flow_forward: float = 1.0
    flow_backward: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {k} must be finite and non-negative, got {v}")


COMPONENTS = ("photometric", "depth", "fba", "flow_forward", "flow_backward")


def _check_shapes(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


# ---------------------------------------------------------------------------
# photometric


def photometric_loss(rendered, observed) -> float:
    """Mean over rays of the squared colour error."""
    r, o = _check_shapes(rendered, observed)
    d = (r - o).reshape(-1, r.shape[-1]) if r.ndim > 1 else (r - o)[None]
    return float(np.mean(np.sum(d * d, axis=-1)))


def photometric_grad(rendered, observed) -> np.ndarray:
    r, o = _check_shapes(rendered, observed)
    n = r.size // r.shape[-1] if r.ndim > 1 else 1
    return 2.0 * (r - o) / n


# ---------------------------------------------------------------------------
# depth


@dataclass
class NormalizedDepth:
    values: np.ndarray
    shift: float
    scale: float  # after the floor
    floored: bool = False


def normalize_depth(D, eps: float = DEPTH_EPS) -> NormalizedDepth:
    """Zero-mean, unit mean-absolute-deviation copy of ``D``."""
    D = np.asarray(D, dtype=np.float64).ravel()
    if D.size < 2:
        raise TooFewSamples(f"need at least 2 depth samples, got {D.size}")
    t = float(D.mean())
    c = D - t
    s = float(np.mean(np.abs(c)))
    floored = s <= eps
    s = max(s, eps)
    return NormalizedDepth(c / s, t, s, floored)


def normalize_depth_backward(D, nd: NormalizedDepth, g) -> np.ndarray:
    """Vector-Jacobian product of :func:`normalize_depth`."""
    D = np.asarray(D, dtype=np.float64).ravel()
    g = np.asarray(g, dtype=np.float64).ravel()
    s = nd.scale
    out = (g - g.mean()) / s
    if not nd.floored:
        c = D - nd.shift
        sg = np.sign(c)
        out -= float(g @ c) / (s * s) * (sg - sg.mean()) / D.size
    return out


def _valid_mask(rendered, prior, mask):
    m = np.isfinite(rendered) & np.isfinite(prior) & (prior > 0)
    if mask is not None:
        m &= np.asarray(mask, dtype=bool).ravel()
    return m


def depth_loss(rendered_depth, prior_depth, mask=None, eps: float = DEPTH_EPS) -> float:
    """Mean absolute difference of the per-frame normalised depths."""
    return depth_loss_and_grad(rendered_depth, prior_depth, mask, eps)[0]


def depth_loss_and_grad(rendered_depth, prior_depth, mask=None, eps: float = DEPTH_EPS):
    r, p = _check_shapes(rendered_depth, prior_depth)
    r, p = r.ravel(), p.ravel()
    m = _valid_mask(r, p, mask)
    if not m.any():
        raise NoValidPixels("no valid depth pixels")
    nr = normalize_depth(r[m], eps)
    npr = normalize_depth(p[m], eps)
    diff = nr.values - npr.values
    loss = float(np.mean(np.abs(diff)))
    g = np.zeros_like(r)
    g[m] = normalize_depth_backward(r[m], nr, np.sign(diff) / diff.size)
    return loss, g


def anchored_depth_loss_and_grad(rendered_depth, prior_depth, mask=None):
    """Plain L1 against the raw prior; used once to pin the global scale."""
    r, p = _check_shapes(rendered_depth, prior_depth)
    r, p = r.ravel(), p.ravel()
    m = _valid_mask(r, p, mask)
    if not m.any():
        raise NoValidPixels("no valid depth pixels")
    diff = r[m] - p[m]
    g = np.zeros_like(r)
    g[m] = np.sign(diff) / diff.size
    return float(np.mean(np.abs(diff))), g


# ---------------------------------------------------------------------------
# flow


def induced_flow(pose_rel: Pose, depth, cam: Camera, pixels):
    """Flow ``p - proj(pose_rel * backproject(p, depth))`` and validity.

    ``pose_rel`` maps source-camera points into the target camera.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    ok = np.isfinite(depth) & (depth > 0)
    X = backproject_points(cam, pixels, np.where(ok, depth, 1.0))
    uv, front = project_points(cam, pose_rel.apply(X))
    valid = ok & front
    return np.where(valid[:, None], pixels - uv, 0.0), valid


@dataclass
class FlowGrads:
    depth: np.ndarray  # (N,) w.r.t. source z-depth
    src: np.ndarray  # (6,) [omega, upsilon] of the source camera-to-world pose
    dst: np.ndarray  # (6,) same for the target pose


def induced_flow_world(src: Pose, dst: Pose, depth, cam: Camera, pixels):
    """Induced flow for camera-to-world poses; returns (flow, valid, cache)."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    ok = np.isfinite(depth) & (depth > 0)
    dz = np.where(ok, depth, 1.0)
    c = backproject_points(cam, pixels, np.ones_like(dz))
    v = (dz[:, None] * c) @ src.rotation.T  # rotated, un-translated
    Xw = v + src.translation
    y = Xw - dst.translation
    Xd = y @ dst.rotation  # R_dst^T y
    uv, front = project_points(cam, Xd)
    valid = ok & front
    flow = np.where(valid[:, None], pixels - uv, 0.0)
    return flow, valid, (c, v, y, Xd, src, dst)


def induced_flow_world_backward(cache, cam: Camera, g_flow, valid) -> FlowGrads:
    """Gradients for poses parametrised as ``R = exp(w) R0, t = t0 + u``."""
    c, v, y, Xd, src, dst = cache
    g_flow = np.where(valid[:, None], np.asarray(g_flow, dtype=np.float64), 0.0)
    z = np.where(valid, Xd[:, 2], 1.0)
    x0, x1 = Xd[:, 0], Xd[:, 1]
    # d uv / d Xd, flow = p - uv
    gu, gv = -g_flow[:, 0], -g_flow[:, 1]
    gX = np.stack(
        [gu * cam.fx / z, gv * cam.fy / z, -(gu * cam.fx * x0 + gv * cam.fy * x1) / z**2], axis=-1
    )
    gy = gX @ dst.rotation.T  # d/dy of (R^T y)
    # dst pose: Xd = R0^T exp(-w) (Xw - t)
    g_dst_w = np.sum(np.cross(gy, y), axis=0)
    g_dst_u = -gy.sum(0)
    # src pose: Xw = exp(w) R0 (d c) + t0 + u
    g_src_u = gy.sum(0)
    g_src_w = np.sum(np.cross(v, gy), axis=0)
    g_depth = np.sum(gy * (c @ src.rotation.T), axis=-1)
    return FlowGrads(g_depth, np.concatenate([g_src_w, g_src_u]), np.concatenate([g_dst_w, g_dst_u]))


def flow_loss(induced, reference, mask=None) -> float:
    """Mean over valid pixels of the L1 norm of the flow difference."""
    return flow_loss_and_grad(induced, reference, mask)[0]


def flow_loss_and_grad(induced, reference, mask=None):
    a, b = _check_shapes(induced, reference)
    a2, b2 = a.reshape(-1, 2), b.reshape(-1, 2)
    m = np.all(np.isfinite(a2) & np.isfinite(b2), axis=-1)
    if mask is not None:
        m &= np.asarray(mask, dtype=bool).reshape(-1)
    if not m.any():
        raise NoValidPixels("no valid flow pixels")
    d = a2 - b2
    n = int(m.sum())
    loss = float(np.abs(d[m]).sum() / n)
    g = np.where(m[:, None], np.sign(d) / n, 0.0)
    return loss, g.reshape(a.shape)


# ---------------------------------------------------------------------------
# total


def total_loss(components, weights: LossWeights | None = None) -> float:
    """Weighted sum; ``components`` maps names in :data:`COMPONENTS` to values
    (missing entries count as zero) or is a length-5 sequence in that order."""
    w = weights or LossWeights()
    if not isinstance(components, dict):
        vals = list(components)
        if len(vals) != len(COMPONENTS):
            raise ValueError(f"expected {len(COMPONENTS)} components, got {len(vals)}")
        components = dict(zip(COMPONENTS, vals))
    unknown = set(components) - set(COMPONENTS)
    if unknown:
        raise KeyError(f"unknown loss components: {sorted(unknown)}")
    total = 0.0
    for name in COMPONENTS:
        val = float(components.get(name, 0.0))
        if not np.isfinite(val):
            raise NonFiniteComponent(f"loss component {name} is {val}")
        total += getattr(w, name) * val
    return total
