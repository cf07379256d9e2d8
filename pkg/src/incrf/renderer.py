"""Ray generation, depth-guided sampling and differentiable compositing.

Samples along a ray at distances ``t_i`` carry widths ``delta_i`` up to the
next valid sample (the last one extends to ``far``).  Weights are
``w_i = T_i (1 - exp(-sigma_i delta_i))`` with the exclusive prefix
``T_i = exp(-sum_{j<i} sigma_j delta_j)``; colour composites over black.
Rendered depth is the expected ray distance ``sum_i w_i t_i``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptySampleSet
from .geometry import Camera, Pose, pixel_directions
from .triplane import FieldEval, FieldGrads, TriplaneField

STRATIFIED = 0
SURFACE = 1


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float


@dataclass
class SampleSet:
    depths: np.ndarray
    deltas: np.ndarray
    sources: np.ndarray

    def __len__(self):
        return len(self.depths)


@dataclass
class RayBatch:
    origins: np.ndarray  # (B, 3)
    dirs: np.ndarray  # (B, 3) unit
    near: np.ndarray  # (B,)
    far: np.ndarray  # (B,)
    z_scale: np.ndarray  # (B,) camera-z per unit of ray distance

    def __len__(self):
        return self.origins.shape[0]

    @classmethod
    def from_rays(cls, rays):
        return cls(
            np.array([r.origin for r in rays], dtype=np.float64),
            np.array([r.direction for r in rays], dtype=np.float64),
            np.array([r.near for r in rays], dtype=np.float64),
            np.array([r.far for r in rays], dtype=np.float64),
            np.ones(len(rays)),
        )

    def subset(self, idx):
        return RayBatch(self.origins[idx], self.dirs[idx], self.near[idx], self.far[idx], self.z_scale[idx])


@dataclass
class SampleBatch:
    t: np.ndarray  # (B, N)
    delta: np.ndarray  # (B, N)
    mask: np.ndarray  # (B, N) bool
    sources: np.ndarray  # (B, N) int8

    @classmethod
    def from_sets(cls, sets):
        n = max(len(s) for s in sets)
        B = len(sets)
        t = np.zeros((B, n))
        delta = np.zeros((B, n))
        mask = np.zeros((B, n), dtype=bool)
        src = np.zeros((B, n), dtype=np.int8)
        for i, s in enumerate(sets):
            k = len(s)
            t[i, :k] = s.depths
            t[i, k:] = s.depths[-1] if k else 0.0
            delta[i, :k] = s.deltas
            mask[i, :k] = True
            src[i, :k] = s.sources
        return cls(t, delta, mask, src)

    def to_set(self, i) -> SampleSet:
        m = self.mask[i]
        return SampleSet(self.t[i][m], self.delta[i][m], self.sources[i][m])


# ---------------------------------------------------------------------------
# rays


def camera_rays(cam: Camera, pose: Pose, pixels, near, far) -> RayBatch:
    """Rays through ``pixels`` for a camera-to-world ``pose``."""
    dc = pixel_directions(cam, pixels).reshape(-1, 3)
    norm = np.linalg.norm(dc, axis=-1)
    dirs = (dc / norm[:, None]) @ pose.rotation.T
    B = dirs.shape[0]
    origins = np.broadcast_to(pose.translation, (B, 3)).copy()
    return RayBatch(
        origins, dirs, np.full(B, float(near)), np.full(B, float(far)), 1.0 / norm
    )


def generate_rays(cam: Camera, pose: Pose, pixels, near=0.1, far=10.0) -> list[Ray]:
    rb = camera_rays(cam, pose, np.asarray(pixels, dtype=np.float64).reshape(-1, 2), near, far)
    return [Ray(rb.origins[i], rb.dirs[i], near, far) for i in range(len(rb))]


# ---------------------------------------------------------------------------
# sampling


def _finish_samples(t, src, valid, near, far):
    """Sort, compute widths and pad; ``valid`` marks real samples."""
    key = np.where(valid, t, np.inf)
    order = np.argsort(key, axis=1, kind="stable")
    t = np.take_along_axis(key, order, axis=1)
    src = np.take_along_axis(src, order, axis=1)
    mask = np.isfinite(t)
    far_b = far[:, None]
    nxt = np.concatenate([t[:, 1:], np.full_like(far_b, np.inf)], axis=1)
    nxt = np.where(np.isfinite(nxt), nxt, far_b)
    eps = 1e-6 * (far - near)[:, None]
    delta = np.maximum(nxt - t, eps)
    delta = np.where(mask, delta, 0.0)
    t = np.where(mask, t, far_b)
    return SampleBatch(t, delta, mask, src.astype(np.int8))


def sample_batch(rays: RayBatch, guide, rng, n_strat=64, n_surface=16, surface_std=0.02):
    """Depth-guided samples for a batch of rays.

    ``guide`` holds one guide distance per ray (NaN or non-positive = none).
    ``surface_std`` is the Gaussian spread as a fraction of ``far - near``.
    """
    B = len(rays)
    near, far = rays.near, rays.far
    span = far - near
    u = rng.random((B, n_strat))
    t_strat = near[:, None] + (np.arange(n_strat)[None] + u) * (span / n_strat)[:, None]
    guide = np.asarray(guide, dtype=np.float64).reshape(B)
    has = np.isfinite(guide) & (guide > 0)
    if n_surface > 0:
        z = rng.standard_normal((B, n_surface))
        t_surf = np.where(has, guide, 0.0)[:, None] + z * (surface_std * span)[:, None]
        t_surf = np.clip(t_surf, near[:, None], far[:, None])
        t = np.concatenate([t_strat, t_surf], axis=1)
        src = np.concatenate(
            [np.zeros((B, n_strat), np.int8), np.ones((B, n_surface), np.int8)], axis=1
        )
        valid = np.concatenate([np.ones((B, n_strat), bool), np.repeat(has[:, None], n_surface, 1)], axis=1)
    else:
        t, src, valid = t_strat, np.zeros((B, n_strat), np.int8), np.ones((B, n_strat), bool)
    return _finish_samples(t, src, valid, near, far)


def sample_ray(ray: Ray, depth_prior, rendered_depth, rng, n_strat=64, n_surface=16, surface_std=0.02) -> SampleSet:
    """Prior depth guides the surface samples; rendered depth is the fallback."""
    guide = np.nan
    for cand in (depth_prior, rendered_depth):
        if cand is not None and np.isfinite(cand) and cand > 0:
            guide = float(cand)
            break
    rb = RayBatch.from_rays([ray])
    return sample_batch(rb, [guide], rng, n_strat, n_surface, surface_std).to_set(0)


def surface_draws(guide, std, count, rng):
    """Unclamped surface draws, exposed for statistical checks of the sampler."""
    return guide + std * rng.standard_normal(count)


# ---------------------------------------------------------------------------
# compositing


@dataclass
class Composite:
    weights: np.ndarray
    transmittance: np.ndarray
    alpha: np.ndarray
    color: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray


def composite(sigma, rgb, t, delta, mask=None) -> Composite:
    sigma = np.asarray(sigma, dtype=np.float64)
    tau = sigma * np.asarray(delta, dtype=np.float64)
    if mask is not None:
        tau = np.where(mask, tau, 0.0)
    acc = np.cumsum(tau, axis=-1)
    excl = np.concatenate([np.zeros_like(acc[..., :1]), acc[..., :-1]], axis=-1)
    T = np.exp(-excl)
    alpha = -np.expm1(-tau)
    w = T * alpha
    color = np.einsum("...n,...nc->...c", w, np.asarray(rgb, dtype=np.float64))
    depth = np.sum(w * t, axis=-1)
    return Composite(w, T, alpha, color, depth, w.sum(-1))


def composite_backward(comp: Composite, sigma, rgb, t, delta, mask, g_color, g_depth, g_opacity):
    """Gradients wrt per-sample density and colour."""
    rgb = np.asarray(rgb, dtype=np.float64)
    q = np.einsum("...c,...nc->...n", g_color, rgb) + g_depth[..., None] * t + g_opacity[..., None]
    wq = comp.weights * q
    # sum over later samples
    later = np.cumsum(wq[..., ::-1], axis=-1)[..., ::-1] - wq
    t_next = comp.transmittance * (1.0 - comp.alpha)
    g_sigma = delta * (t_next * q - later)
    if mask is not None:
        g_sigma = np.where(mask, g_sigma, 0.0)
    g_rgb = comp.weights[..., None] * g_color[..., None, :]
    return g_sigma, g_rgb


# ---------------------------------------------------------------------------
# field rendering


@dataclass
class RenderState:
    field: TriplaneField
    rays: RayBatch
    samples: SampleBatch
    ev: FieldEval
    sigma: np.ndarray  # (B, N), masked
    rgb: np.ndarray  # (B, N, 3)
    comp: Composite

    @property
    def color(self):
        return self.comp.color

    @property
    def depth(self):
        return self.comp.depth

    @property
    def opacity(self):
        return self.comp.opacity

    @property
    def z_depth(self):
        return self.comp.depth * self.rays.z_scale


def render_batch(field: TriplaneField, rays: RayBatch, samples: SampleBatch) -> RenderState:
    B, N = samples.t.shape
    if N == 0 or not samples.mask.any(axis=1).all():
        raise EmptySampleSet("every ray needs at least one sample")
    pts = rays.origins[:, None, :] + samples.t[..., None] * rays.dirs[:, None, :]
    ray_index = np.repeat(np.arange(B), N)
    ev = field.evaluate(pts.reshape(-1, 3), rays.dirs, ray_index=ray_index)
    sigma = np.where(samples.mask, ev.sigma.reshape(B, N).astype(np.float64), 0.0)
    rgb = ev.rgb.reshape(B, N, 3).astype(np.float64)
    comp = composite(sigma, rgb, samples.t, samples.delta, samples.mask)
    return RenderState(field, rays, samples, ev, sigma, rgb, comp)


def render(field: TriplaneField, ray: Ray, samples: SampleSet):
    """Single-ray render returning ``(color, depth, opacity)``."""
    if len(samples) == 0:
        raise EmptySampleSet("no samples")
    st = render_batch(field, RayBatch.from_rays([ray]), SampleBatch.from_sets([samples]))
    return st.color[0], float(st.depth[0]), float(st.opacity[0])


@dataclass
class RenderGrads:
    field: FieldGrads
    origins: np.ndarray | None  # (B, 3)
    dirs: np.ndarray | None  # (B, 3)


def render_backward(state: RenderState, g_color, g_depth=None, g_opacity=None,
                    grads: FieldGrads | None = None, want_rays: bool = True) -> RenderGrads:
    B, N = state.samples.t.shape
    g_color = np.asarray(g_color, dtype=np.float64).reshape(B, 3)
    g_depth = np.zeros(B) if g_depth is None else np.asarray(g_depth, dtype=np.float64).reshape(B)
    g_opacity = np.zeros(B) if g_opacity is None else np.asarray(g_opacity, dtype=np.float64).reshape(B)
    s = state.samples
    g_sigma, g_rgb = composite_backward(
        state.comp, state.sigma, state.rgb, s.t, s.delta, s.mask, g_color, g_depth, g_opacity
    )
    fgrads, g_x, g_d = state.field.backward(
        state.ev, g_sigma.reshape(-1), g_rgb.reshape(-1, 3), grads, want_inputs=want_rays
    )
    if not want_rays:
        return RenderGrads(fgrads, None, None)
    g_x = g_x.reshape(B, N, 3)
    g_o = g_x.sum(1)
    g_dir = np.einsum("bn,bnc->bc", s.t, g_x) + g_d
    return RenderGrads(fgrads, g_o, g_dir)


def pose_tangent_grad(rays: RayBatch, g_origins, g_dirs) -> np.ndarray:
    """Left-tangent gradient ``[omega, upsilon]`` of a camera-to-world pose
    that generated every ray in ``rays``."""
    g_ups = g_origins.sum(0)
    g_om = np.cross(rays.origins, g_origins).sum(0) + np.cross(rays.dirs, g_dirs).sum(0)
    return np.concatenate([g_om, g_ups])
