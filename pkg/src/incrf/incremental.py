"""Progressive registration over a chain of local tri-plane fields.

Frames are added one at a time.  Each new pose starts as a copy of the
previous one, is aligned against the previous frame with feature-metric LM,
and is then refined jointly with the active field over the active window of
frames.  When the camera leaves the active field's bound the field is
refined at the fine resolution, frozen, and a new field is allocated around
the current camera, re-using the last ``overlap`` frames.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import median_filter

from . import fba
from .config import ReconConfig
from .errors import AlignmentError, EmptyRegistry, EmptySequence, ImageTooSmall
from .geometry import Camera, Pose, so3_exp
from .losses import (
    depth_loss_and_grad,
    flow_loss_and_grad,
    induced_flow_world,
    induced_flow_world_backward,
    photometric_grad,
    photometric_loss,
)
from .optim import Adam, RowAdam
from .renderer import RayBatch, SampleBatch, _finish_samples, camera_rays, render_backward, render_batch, sample_batch
from .triplane import TriplaneField

logger = logging.getLogger(__name__)


@dataclass
class Frame:
    index: int  # dataset index (used to look up flows)
    image: np.ndarray  # (H, W, 3) in [0, 1]
    prior: np.ndarray | None = None  # (H, W) z-depth, <= 0 or NaN = invalid


@dataclass
class FieldEntry:
    field: TriplaneField
    center: np.ndarray
    bound: float
    start: int  # first frame of the window (sequence position)
    end: int  # last frame registered while active
    frozen: bool = False
    checksum: str | None = None
    upsampled: bool = False
    refine_iters: int = 0


class FieldRegistry:
    def __init__(self):
        self.entries: list[FieldEntry] = []

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i) -> FieldEntry:
        return self.entries[i]

    @property
    def active(self) -> FieldEntry:
        if not self.entries:
            raise EmptyRegistry("no fields allocated")
        return self.entries[-1]

    def allocate(self, f: TriplaneField, center, bound: float, start: int) -> FieldEntry:
        e = FieldEntry(f, np.asarray(center, dtype=np.float64).copy(), float(bound), start, start)
        self.entries.append(e)
        return e

    def freeze_active(self):
        e = self.active
        e.frozen = True
        e.checksum = e.field.checksum()

    def windows(self):
        return [(e.start, e.end) for e in self.entries]

    def check_invariants(self):
        unfrozen = [i for i, e in enumerate(self.entries) if not e.frozen]
        assert len(unfrozen) <= 1 and (not unfrozen or unfrozen[0] == len(self.entries) - 1)
        for e in self.entries:
            if e.frozen:
                assert e.field.checksum() == e.checksum, "frozen field changed"
        for a, b in zip(self.entries, self.entries[1:]):
            assert b.start <= a.end + 1, "windows must be contiguous"

    def select(self, origin) -> int:
        """Index of the field whose centre is nearest ``origin`` (ties: latest)."""
        if not self.entries:
            raise EmptyRegistry("no fields allocated")
        d = np.array([np.linalg.norm(np.asarray(origin) - e.center) for e in self.entries])
        best = d.min()
        return int(np.flatnonzero(d <= best + 1e-12)[-1])


@dataclass
class StepStats:
    photometric: float = 0.0
    depth: float = 0.0
    flow_forward: float = 0.0
    flow_backward: float = 0.0
    anchor: float = 0.0
    total: float = 0.0


@dataclass
class OptimState:
    poses: list
    fixed: np.ndarray
    window_start: int = 0
    last: int = -1
    iteration: int = 0
    field_iteration: int = 0
    depth_cache: np.ndarray | None = None
    prior_affine: dict = field(default_factory=dict)
    gauge_depth: dict = field(default_factory=dict)  # frame -> (H, W) z-depth whose mean/MAD pin the scale
    peak_params: int = 0


def _new_field(cfg: ReconConfig, center, rng) -> TriplaneField:
    f = TriplaneField.random(
        cfg.coarse_res, rng, scale=cfg.init_scale, rank=cfg.rank, n_features=cfg.n_features,
        app_rank=cfg.app_rank, center=center, half_extent=cfg.half_extent,
        density_shift=cfg.density_shift, hidden=cfg.hidden, dtype=np.dtype(cfg.dtype),
    )
    return f


def _affine_fit(src, dst):
    """(a, b) with ``a src + b`` matching mean and mean absolute deviation of dst."""
    ms, md = src.mean(), dst.mean()
    ss = np.mean(np.abs(src - ms))
    sd = np.mean(np.abs(dst - md))
    if ss < 1e-9 or not np.isfinite(sd):
        return None
    a = sd / ss
    return float(a), float(md - a * ms)


class IncrementalReconstructor:
    def __init__(self, cfg: ReconConfig, camera: Camera, frames, flow_fn=None):
        if len(frames) == 0:
            raise EmptySequence("no frames to reconstruct")
        self.cfg = cfg
        self.cam = camera
        self.frames = list(frames)
        self.flow_fn = flow_fn
        n = len(self.frames)
        self.state = OptimState([None] * n, np.zeros(n, dtype=bool))
        self.state.depth_cache = np.full((n, camera.height, camera.width), np.nan, dtype=np.float32)
        self.registry = FieldRegistry()
        self.events: list = []
        self.diagnostics: list = []
        self.history: list = []
        lr = [cfg.lr_rot] * 3 + [cfg.lr_trans] * 3
        self.pose_opt = RowAdam(n, 6, lr, decay=cfg.lr_pose_decay, decay_steps=cfg.lr_pose_decay_iters)
        self._pyr = {}
        self._field_opt = None
        self._fields_made = 0
        self.weights = cfg.weights()

    # -- helpers ----------------------------------------------------------

    def _rng(self, *tag):
        return np.random.default_rng(np.random.SeedSequence([self.cfg.seed, *tag]))

    def _make_field(self, center) -> TriplaneField:
        rng = self._rng(1, self._fields_made)
        self._fields_made += 1
        return _new_field(self.cfg, center, rng)

    def _reset_field_opt(self):
        f = self.registry.active.field
        lrs = {
            "lines": self.cfg.lr_factors, "planes": self.cfg.lr_factors,
            "w1": self.cfg.lr_decoder, "b1": self.cfg.lr_decoder,
            "w2": self.cfg.lr_decoder, "b2": self.cfg.lr_decoder,
        }
        self._field_opt = Adam(f.params(), lrs)

    def _pyramid(self, k):
        if k not in self._pyr:
            levels = self.cfg.fba_levels
            while levels > 1 and min(self.cam.width, self.cam.height) // 2 ** (levels - 1) < fba.MIN_LEVEL_SIZE:
                levels -= 1
            self._pyr[k] = fba.build_pyramid(self.frames[k].image, levels, blur=self.cfg.fba_blur)
        return self._pyr[k]

    def optimizable_param_count(self) -> int:
        e = self.registry.active
        free = int(np.sum(~self.state.fixed[e.start : self.state.last + 1]))
        return e.field.param_count() + e.field.decoder_param_count() + 6 * free

    def _track_peak(self):
        self.state.peak_params = max(self.state.peak_params, self.optimizable_param_count())

    def aligned_prior(self, k):
        """Depth prior of frame ``k`` mapped onto the rendered depth scale."""
        fr = self.frames[k]
        if fr.prior is None:
            return None
        ab = self.state.prior_affine.get(k)
        if ab is None:
            cache = self.state.depth_cache[k]
            m = np.isfinite(cache) & (fr.prior > 0) & np.isfinite(fr.prior)
            if m.sum() >= 8:
                ab = _affine_fit(fr.prior[m], cache[m].astype(np.float64))
        if ab is None:
            return None
        out = ab[0] * fr.prior + ab[1]
        return np.where((fr.prior > 0) & (out > 0), out, np.nan)

    # -- one optimisation step --------------------------------------------

    def step(self, window, opt_field: bool = True, opt_poses: bool = True) -> StepStats:
        cfg, cam, st = self.cfg, self.cam, self.state
        entry = self.registry.active
        fld = entry.field
        rng = self._rng(2, st.iteration)
        window = list(window)
        if len(window) > cfg.frames_per_iter:
            newest = window[-1]
            others = rng.choice(window[:-1], cfg.frames_per_iter - 1, replace=False)
            window = sorted([*others.tolist(), newest])
        nf = len(window)
        per = max(cfg.rays_per_iter // nf, 2)
        H, W = cam.height, cam.width
        pix_idx, batches, owners = [], [], []
        for k in window:
            idx = rng.integers(0, H * W, per)
            pix = np.stack([idx % W, idx // W], axis=-1).astype(np.float64)
            batches.append(camera_rays(cam, st.poses[k], pix, cfg.near, cfg.far))
            pix_idx.append(idx)
            owners.append(np.full(per, k))
        rays = RayBatch(
            np.concatenate([b.origins for b in batches]),
            np.concatenate([b.dirs for b in batches]),
            np.concatenate([b.near for b in batches]),
            np.concatenate([b.far for b in batches]),
            np.concatenate([b.z_scale for b in batches]),
        )
        owner = np.concatenate(owners)
        flat = np.concatenate(pix_idx)
        # surface-sample guide: aligned prior, else cached rendered depth
        guide = np.full(len(rays), np.nan)
        for j, k in enumerate(window):
            sl = slice(j * per, (j + 1) * per)
            ab = st.prior_affine.get(k)
            fr = self.frames[k]
            if fr.prior is not None and ab is not None:
                z = ab[0] * fr.prior.ravel()[flat[sl]] + ab[1]
                z = np.where(fr.prior.ravel()[flat[sl]] > 0, z, np.nan)
            else:
                z = st.depth_cache[k].ravel()[flat[sl]].astype(np.float64)
            guide[sl] = z / rays.z_scale[sl]
        samples = sample_batch(rays, guide, rng, cfg.n_strat, cfg.n_surface, cfg.surface_std)
        rs = render_batch(fld, rays, samples)
        target = np.concatenate([self.frames[k].image.reshape(-1, 3)[flat[j * per:(j + 1) * per]] for j, k in enumerate(window)])
        stats = StepStats()
        w = self.weights
        stats.photometric = photometric_loss(rs.color, target)
        g_color = w.photometric * photometric_grad(rs.color, target)
        z = rs.z_depth
        g_z = np.zeros(len(rays))
        pose_g = {k: np.zeros(6) for k in window}
        n_depth = sum(1 for k in window if self.frames[k].prior is not None)
        fwd, bwd = [], []
        for j, k in enumerate(window):
            sl = slice(j * per, (j + 1) * per)
            fr = self.frames[k]
            if fr.prior is not None and w.depth > 0:
                prior = fr.prior.ravel()[flat[sl]]
                try:
                    l, g = depth_loss_and_grad(z[sl], prior)
                    stats.depth += l / n_depth
                    g_z[sl] += w.depth * g / n_depth
                except Exception:
                    pass
            if k in st.gauge_depth and cfg.scale_anchor > 0:
                # pin the gauge: mean and mean-absolute-deviation of the depth
                # follow a target in world units (the normalised loss alone
                # leaves an affine ambiguity that bends the geometry and lets
                # each new field pick its own scale)
                target = st.gauge_depth[k].ravel()[flat[sl]]
                m = np.isfinite(target) & (target > 0)
                if m.sum() >= 2:
                    zm, pm = z[sl][m], target[m]
                    n = zm.size
                    mp, sp = pm.mean(), np.mean(np.abs(pm - pm.mean()))
                    c = zm - zm.mean()
                    rel_m = (zm.mean() - mp) / mp
                    rel_s = (np.mean(np.abs(c)) - sp) / mp
                    ws = cfg.anchor_spread
                    stats.anchor += rel_m * rel_m + ws * rel_s * rel_s
                    sg = np.sign(c)
                    gz = np.zeros(per)
                    gz[m] = 2.0 * rel_m / mp / n + 2.0 * ws * rel_s / mp * (sg - sg.mean()) / n
                    g_z[sl] += cfg.scale_anchor * gz
            if self.flow_fn is None:
                continue
            for nb, acc, wt in ((k + 1, fwd, w.flow_forward), (k - 1, bwd, w.flow_backward)):
                if wt <= 0 or nb < 0 or nb > st.last:
                    continue
                ref = self.flow_fn(fr.index, self.frames[nb].index)
                if ref is None:
                    continue
                rflow, rvalid = ref
                pix = np.stack([flat[sl] % W, flat[sl] // W], axis=-1).astype(np.float64)
                fl, valid, cache = induced_flow_world(st.poses[k], st.poses[nb], z[sl], cam, pix)
                valid &= rvalid.ravel()[flat[sl]]
                if not valid.any():
                    continue
                acc.append((j, k, nb, sl, fl, valid, cache, rflow.reshape(-1, 2)[flat[sl]]))
        for acc, wt, name in ((fwd, w.flow_forward, "flow_forward"), (bwd, w.flow_backward, "flow_backward")):
            for j, k, nb, sl, fl, valid, cache, ref in acc:
                l, g = flow_loss_and_grad(fl, ref, valid)
                setattr(stats, name, getattr(stats, name) + l / len(acc))
                fg = induced_flow_world_backward(cache, cam, g * (wt / len(acc)), valid)
                g_z[sl] += fg.depth
                pose_g[k] += fg.src
                if nb in pose_g:
                    pose_g[nb] += fg.dst
                elif not st.fixed[nb]:
                    pose_g[nb] = fg.dst.copy()
        stats.total = (
            w.photometric * stats.photometric + w.depth * stats.depth
            + w.flow_forward * stats.flow_forward + w.flow_backward * stats.flow_backward
            + cfg.scale_anchor * stats.anchor
        )
        grads = render_backward(rs, g_color, g_z * rays.z_scale, None, want_rays=opt_poses)
        if opt_field and not entry.frozen:
            decay = cfg.lr_decay ** min(st.field_iteration / max(cfg.lr_decay_iters, 1), 1.0)
            self._field_opt.step(dict(grads.field.items()), lr_scale=decay)
            st.field_iteration += 1
        if opt_poses:
            for j, k in enumerate(window):
                sl = slice(j * per, (j + 1) * per)
                pose_g[k][:3] += np.cross(rays.dirs[sl], grads.dirs[sl]).sum(0)
                pose_g[k][3:] += grads.origins[sl].sum(0)
            rows = [k for k in sorted(pose_g) if not st.fixed[k]]
            if rows:
                upd = self.pose_opt.step(rows, np.array([pose_g[k] for k in rows]))
                for k, d in zip(rows, upd):
                    p = st.poses[k]
                    st.poses[k] = Pose(so3_exp(d[:3]) @ p.rotation, p.translation + d[3:])
        # caches for the next iteration's guides
        for j, k in enumerate(window):
            sl = slice(j * per, (j + 1) * per)
            st.depth_cache[k].ravel()[flat[sl]] = z[sl]
            fr = self.frames[k]
            if fr.prior is not None:
                prior = fr.prior.ravel()[flat[sl]]
                m = np.isfinite(prior) & (prior > 0) & (rs.opacity[sl] > 0.5)
                if m.sum() >= 8:
                    ab = _affine_fit(prior[m], z[sl][m])
                    if ab is not None:
                        st.prior_affine[k] = ab
        st.iteration += 1
        self._track_peak()
        self.history.append(stats)
        return stats

    def optimize(self, iters: int, window, opt_field=True, opt_poses=True):
        for _ in range(int(iters)):
            self.step(window, opt_field, opt_poses)

    # -- algorithm --------------------------------------------------------

    def window(self):
        return list(range(self.state.window_start, self.state.last + 1))

    def initialize_first_field(self) -> FieldRegistry:
        st = self.state
        st.poses[0] = Pose.identity()
        st.fixed[0] = True
        st.last = 0
        st.window_start = 0
        if self.frames[0].prior is not None:
            prior = self.frames[0].prior
            st.gauge_depth[0] = np.where(np.isfinite(prior) & (prior > 0), prior, np.nan)
        self.registry.allocate(self._make_field(np.zeros(3)), np.zeros(3), self.cfg.bound, 0)
        self.events.append(("allocate", 0, 0))
        self._reset_field_opt()
        st.field_iteration = 0
        self.optimize(self.cfg.init_iters, [0], opt_field=True, opt_poses=False)
        return self.registry

    def register_frame(self, q: int):
        st = self.state
        st.poses[q] = st.poses[q - 1]
        st.last = q
        self.registry.active.end = q
        if self.cfg.use_fba:
            self._align(q - 1, q)
        self._track_peak()
        self.optimize(self.cfg.register_iters, self.window())

    def _render_grid(self, fld, k, tag):
        """z-depth and opacity of frame ``k`` on the sparse ``fba_stride`` grid."""
        cfg, cam = self.cfg, self.cam
        s = max(int(cfg.fba_stride), 1)
        gy, gx = np.mgrid[s // 2 : cam.height : s, s // 2 : cam.width : s]
        pix = np.stack([gx.ravel(), gy.ravel()], axis=-1).astype(np.float64)
        rays = camera_rays(cam, self.state.poses[k], pix, cfg.near, cfg.far)
        _, dep, opa = render_rays(fld, rays, cfg, self._rng(tag, k))
        return gy, gx, dep * rays.z_scale, opa

    def _grid_depth(self, fld, k):
        """z-depth of frame ``k`` rendered on the sparse grid and spread to full
        resolution by nearest grid node; NaN where the field is transparent."""
        cam, s = self.cam, max(int(self.cfg.fba_stride), 1)
        gy, gx, z, opa = self._render_grid(fld, k, 5)
        z = np.where(opa > 0.5, z, np.nan).reshape(gy.shape)
        iy = np.clip(np.arange(cam.height) // s, 0, gy.shape[0] - 1)
        ix = np.clip(np.arange(cam.width) // s, 0, gx.shape[1] - 1)
        return z[np.ix_(iy, ix)]

    def _fba_depth(self, a):
        """Depth used to lift frame ``a`` into 3-D: its (median-filtered) prior
        mapped onto the field's scale with an affine fit against a fresh
        rendering on a sparse grid; the rendering itself when there is no prior."""
        cfg, cam, st = self.cfg, self.cam, self.state
        gy, gx, z, opa = self._render_grid(self.registry.active.field, a, 3)
        fr = self.frames[a]
        if fr.prior is None:
            out = np.full((cam.height, cam.width), np.nan)
            out[gy, gx] = np.where(opa > 0.5, z, np.nan).reshape(gy.shape)
            return out
        prior = fr.prior
        if cfg.fba_prior_median > 1:
            prior = median_filter(np.where(prior > 0, prior, 0.0), size=cfg.fba_prior_median)
        p = prior[gy, gx].ravel()
        m = (p > 0) & np.isfinite(p) & (opa > 0.5)
        ab = _affine_fit(p[m], z[m]) if m.sum() >= 8 else None
        if ab is None:
            return st.depth_cache[a].astype(np.float64)
        out = ab[0] * prior + ab[1]
        return np.where((prior > 0) & (out > 0), out, np.nan)

    def _align(self, a, b):
        st, cam = self.state, self.cam
        depth = self._fba_depth(a)
        record = {"src": a, "dst": b}
        try:
            pa, pb = self._pyramid(a), self._pyramid(b)
            corr = fba.make_correspondences(cam, st.poses[a], depth, stride=self.cfg.fba_stride)
            est, diag = fba.align(pa, pb, corr, st.poses[b].inverse(), cam)
            st.poses[b] = est.inverse()
            record.update(status=diag.status, initial=diag.initial_error, final=diag.final_error,
                          iterations=len(diag.records))
        except (AlignmentError, ImageTooSmall) as exc:
            record.update(status=type(exc).__name__, message=str(exc))
            logger.info("alignment %d->%d failed: %s", a, b, exc)
        self.diagnostics.append(record)

    def check_bound_and_allocate(self) -> FieldRegistry:
        st = self.state
        e = self.registry.active
        q = st.last
        if np.linalg.norm(st.poses[q].translation - e.center) < e.bound:
            return self.registry
        self.refine_before_freeze()
        j = len(self.registry) - 1
        self.registry.freeze_active()
        self.events.append(("freeze", j, q))
        st.fixed[: q + 1] = True
        start = max(st.window_start, q - self.cfg.overlap + 1)
        for k in range(start, q + 1):
            st.gauge_depth[k] = self._grid_depth(self.registry.active.field, k)
        center = st.poses[q].translation
        self.registry.allocate(self._make_field(center), center, self.cfg.bound, start)
        self.registry.active.end = q
        self.events.append(("allocate", j + 1, q))
        self._track_peak()
        st.window_start = start
        self.events.append(("window", start))
        self._reset_field_opt()
        st.field_iteration = 0
        self.optimize(self.cfg.init_iters, self.window(), opt_field=True, opt_poses=False)
        return self.registry

    def refine_before_freeze(self):
        e = self.registry.active
        if not e.upsampled and self.cfg.fine_res > e.field.n:
            e.field = e.field.upsample(self.cfg.fine_res)
            self._reset_field_opt()
        e.upsampled = True
        window = self.window()
        iters = len(window) * self.cfg.refine_iters_per_frame
        self.optimize(iters, window)
        e.refine_iters = iters

    def finalize(self):
        if not self.registry.active.frozen:
            self.refine_before_freeze()
            self.registry.freeze_active()
            self.events.append(("freeze", len(self.registry) - 1, self.state.last))

    def run(self):
        self.initialize_first_field()
        for q in range(1, len(self.frames)):
            self.register_frame(q)
            self.check_bound_and_allocate()
            logger.info("frame %d/%d registered, %d fields", q + 1, len(self.frames), len(self.registry))
        self.finalize()
        return list(self.state.poses)


# ---------------------------------------------------------------------------
# rendering across the registry


def _midpoint_samples(rays: RayBatch, n: int) -> SampleBatch:
    B = len(rays)
    u = (np.arange(n) + 0.5) / n
    t = rays.near[:, None] + u[None] * (rays.far - rays.near)[:, None]
    return _finish_samples(t, np.zeros((B, n), np.int8), np.ones((B, n), bool), rays.near, rays.far)


def render_rays(fld: TriplaneField, rays: RayBatch, cfg: ReconConfig, rng, chunk: int = 4096):
    """Two-pass render: midpoint samples, then stratified + surface samples
    around the first-pass depth.  Returns (color, ray depth, opacity)."""
    col = np.zeros((len(rays), 3))
    dep = np.zeros(len(rays))
    opa = np.zeros(len(rays))
    for s in range(0, len(rays), chunk):
        sub = rays.subset(slice(s, s + chunk))
        first = render_batch(fld, sub, _midpoint_samples(sub, cfg.eval_strat))
        guide = np.where(first.opacity > 0.5, first.depth / np.maximum(first.opacity, 1e-6), np.nan)
        smp = sample_batch(sub, guide, rng, cfg.eval_strat, cfg.n_surface, cfg.surface_std)
        st = render_batch(fld, sub, smp)
        col[s : s + chunk] = st.color
        dep[s : s + chunk] = st.depth
        opa[s : s + chunk] = st.opacity
    return col, dep, opa


def render_global(registry: FieldRegistry, rays, cfg: ReconConfig | None = None, rng=None):
    """Render rays with the field nearest each ray origin; returns (color, depth)."""
    if len(registry) == 0:
        raise EmptyRegistry("no fields to render")
    cfg = cfg or ReconConfig()
    rng = rng or np.random.default_rng(0)
    if not isinstance(rays, RayBatch):
        rays = RayBatch.from_rays(list(rays))
    sel = np.array([registry.select(o) for o in rays.origins])
    col = np.zeros((len(rays), 3))
    dep = np.zeros(len(rays))
    for j in np.unique(sel):
        idx = np.flatnonzero(sel == j)
        c, d, _ = render_rays(registry[j].field, rays.subset(idx), cfg, rng)
        col[idx], dep[idx] = c, d
    return col, dep


def render_view(registry: FieldRegistry, cam: Camera, pose: Pose, cfg: ReconConfig | None = None, seed: int = 0):
    """Full image and z-depth for a camera-to-world pose."""
    rays = camera_rays(cam, pose, cam.pixel_grid(), (cfg or ReconConfig()).near, (cfg or ReconConfig()).far)
    col, dep = render_global(registry, rays, cfg, np.random.default_rng(seed))
    return col.reshape(cam.height, cam.width, 3), (dep * rays.z_scale).reshape(cam.height, cam.width)


def refine_pose(registry: FieldRegistry, cam: Camera, pose: Pose, image, cfg: ReconConfig,
                iters: int | None = None, seed: int = 0) -> Pose:
    """Photometric refinement of a single camera-to-world pose against frozen
    fields (used to place held-out views before scoring them)."""
    iters = cfg.eval_refine_iters if iters is None else int(iters)
    if iters <= 0:
        return pose
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4, seed]))
    fld = registry[registry.select(pose.translation)].field
    H, W = cam.height, cam.width
    rays = camera_rays(cam, pose, cam.pixel_grid(), cfg.near, cfg.far)
    _, dep, opa = render_rays(fld, rays, cfg, rng)
    guide_z = np.where(opa > 0.5, dep * rays.z_scale, np.nan)
    target = np.asarray(image, dtype=np.float64).reshape(-1, 3)
    opt = RowAdam(1, 6, [cfg.lr_rot] * 3 + [cfg.lr_trans] * 3)
    for _ in range(iters):
        idx = rng.integers(0, H * W, cfg.rays_per_iter)
        pix = np.stack([idx % W, idx // W], axis=-1).astype(np.float64)
        rb = camera_rays(cam, pose, pix, cfg.near, cfg.far)
        smp = sample_batch(rb, guide_z[idx] / rb.z_scale, rng, cfg.n_strat, cfg.n_surface, cfg.surface_std)
        rs = render_batch(fld, rb, smp)
        g = render_backward(rs, photometric_grad(rs.color, target[idx]), want_rays=True)
        tg = np.concatenate([np.cross(rb.dirs, g.dirs).sum(0), g.origins.sum(0)])
        d = opt.step([0], tg[None])[0]
        pose = Pose(so3_exp(d[:3]) @ pose.rotation, pose.translation + d[3:])
    return pose
