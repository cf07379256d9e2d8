"""Synthetic ground truth: ray-cast primitive scenes and brute-force references.

Nothing here goes through the renderer or the factorised field, so the
outputs can serve as independent references for both.  Depth maps are
camera z-depth; flows follow the source-minus-target convention
``flow = p_src - p_dst``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import BadSpec, TooLarge
from .geometry import Camera, Pose, backproject_points, project_points, so3_exp

MAX_DENSE_RES = 32
HIT_EPS = 1e-6


# ---------------------------------------------------------------------------
# textures


@dataclass
class Texture:
    """Sum of plane waves on top of a base colour, evaluated in 3D."""

    base: np.ndarray
    waves: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))  # wave vectors
    phases: np.ndarray = field(default_factory=lambda: np.zeros(0))
    amps: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))  # per-channel
    checker: float = 0.0  # cell size, 0 = off
    checker_amp: float = 0.0

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        c = np.broadcast_to(self.base, x.shape).copy()
        if len(self.waves):
            s = np.sin(x @ self.waves.T + self.phases)
            c += s @ self.amps
        if self.checker > 0:
            q = np.floor(x / self.checker).sum(-1)
            c += self.checker_amp * np.where(q % 2 == 0, 1.0, -1.0)[..., None]
        return np.clip(c, 0.0, 1.0)


def make_texture(desc, rng) -> Texture:
    kind = desc.get("kind", "waves")
    base = np.asarray(desc.get("base", rng.uniform(0.3, 0.7, 3)), dtype=np.float64)
    if kind == "constant":
        return Texture(base)
    if kind == "checker":
        return Texture(base, checker=float(desc.get("cell", 0.5)), checker_amp=float(desc.get("amp", 0.25)))
    if kind != "waves":
        raise BadSpec(f"unknown texture kind {kind!r}")
    k = int(desc.get("count", 6))
    freq = float(desc.get("freq", 1.5))  # cycles per scene unit
    amp = float(desc.get("amp", 0.25))
    dirs = rng.normal(size=(k, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    # spread frequencies over an octave-ish band so coarse and fine levels see texture
    f = freq * rng.uniform(0.5, 1.5, size=k)
    waves = dirs * (2 * np.pi * f)[:, None]
    phases = rng.uniform(0, 2 * np.pi, size=k)
    amps = rng.uniform(-1, 1, size=(k, 3)) * amp / np.sqrt(k)
    return Texture(base, waves, phases, amps)


# ---------------------------------------------------------------------------
# primitives


@dataclass
class Box:
    center: np.ndarray
    half: np.ndarray
    texture: Texture
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))  # box-to-world
    inside: bool = False  # seen from the interior (room walls)

    def intersect(self, o, d):
        R = self.rotation
        ol = (o - self.center) @ R
        dl = d @ R
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dl
            t1 = (-self.half - ol) * inv
            t2 = (self.half - ol) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
        hit = tmax >= tmin
        if self.inside:
            t = np.where(hit & (tmax > HIT_EPS), tmax, np.inf)
        else:
            t = np.where(hit & (tmin > HIT_EPS), tmin, np.inf)
        return t

    def normal(self, x):
        xl = (x - self.center) @ self.rotation / self.half
        ax = np.argmax(np.abs(xl), axis=-1)
        n = np.zeros_like(xl)
        n[np.arange(len(xl)), ax] = np.sign(xl[np.arange(len(xl)), ax])
        return n @ self.rotation.T


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    texture: Texture

    def intersect(self, o, d):
        oc = o - self.center
        b = np.sum(oc * d, -1)
        c = np.sum(oc * oc, -1) - self.radius**2
        disc = b * b - c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > HIT_EPS, t0, np.where(t1 > HIT_EPS, t1, np.inf))
        return np.where(disc >= 0, t, np.inf)

    def normal(self, x):
        n = x - self.center
        return n / np.linalg.norm(n, axis=-1, keepdims=True)


LIGHT = np.array([0.3, -0.8, -0.5]) / np.linalg.norm([0.3, -0.8, -0.5])


def cast(primitives, origins, dirs):
    """Nearest hit distance and primitive index per ray (inf / -1 on miss)."""
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    best = np.full(dirs.shape[0], np.inf)
    idx = np.full(dirs.shape[0], -1)
    for i, prim in enumerate(primitives):
        t = prim.intersect(origins, dirs)
        closer = t < best
        best = np.where(closer, t, best)
        idx = np.where(closer, i, idx)
    return best, idx


def shade(primitives, points, idx):
    """View-independent colour: texture times a fixed diffuse term."""
    out = np.zeros((len(points), 3))
    for i, prim in enumerate(primitives):
        m = idx == i
        if not m.any():
            continue
        x = points[m]
        lam = np.abs(prim.normal(x) @ LIGHT)
        out[m] = prim.texture(x) * (0.7 + 0.3 * lam)[:, None]
    return out


# ---------------------------------------------------------------------------
# trajectories


def look_at(eye, target, down=(0.0, 1.0, 0.0)) -> Pose:
    """Camera-to-world pose at ``eye`` with +z towards ``target`` (y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(down, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)


def make_trajectory(script) -> list[Pose]:
    kind = script.get("type")
    n = int(script.get("n", 0))
    if kind == "poses":
        from .pipeline.io import pose_from_tum_row

        return [pose_from_tum_row(r) for r in script["poses"]]
    if n < 2:
        raise BadSpec("trajectory needs at least 2 poses")
    s = np.linspace(0.0, 1.0, n)
    if kind == "orbit":
        c = np.asarray(script.get("center", [0, 0, 0]), dtype=np.float64)
        r = float(script.get("radius", 3.0))
        h = float(script.get("height", 0.0))
        arc = np.deg2rad(float(script.get("arc_deg", 60.0)))
        a0 = np.deg2rad(float(script.get("start_deg", -90.0)))
        out = []
        for a in a0 + arc * s:
            eye = c + np.array([r * np.cos(a), h, r * np.sin(a)])
            out.append(look_at(eye, c))
        return out
    if kind in ("line", "sweep"):
        p0 = np.asarray(script["start"], dtype=np.float64)
        p1 = np.asarray(script["end"], dtype=np.float64)
        look = np.asarray(script.get("look", [0, 0, 1]), dtype=np.float64)
        wig = np.asarray(script.get("wiggle", [0, 0, 0]), dtype=np.float64)
        yaw = np.deg2rad(float(script.get("yaw_deg", 0.0)))
        pitch = np.deg2rad(float(script.get("pitch_deg", 0.0)))
        cycles = float(script.get("cycles", 1.0))
        base = look_at(np.zeros(3), look).rotation
        out = []
        for si in s:
            ph = 2 * np.pi * cycles * si
            eye = p0 + si * (p1 - p0) + wig * np.sin(ph)
            rot = so3_exp([pitch * np.sin(2 * ph), yaw * np.sin(ph), 0.0]) if kind == "sweep" else np.eye(3)
            out.append(Pose(base @ rot, eye))
        return out
    raise BadSpec(f"unknown trajectory type {kind!r}")


# ---------------------------------------------------------------------------
# scene


@dataclass
class SyntheticScene:
    camera: Camera
    poses: list  # camera-to-world
    primitives: list
    images: np.ndarray  # (F, H, W, 3)
    depths: np.ndarray  # (F, H, W) z-depth, inf on miss
    spec: dict
    seed: int
    _flows: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.poses)

    def flow(self, src: int, dst: int):
        """(flow (H, W, 2), valid (H, W)) from frame ``src`` to ``dst``."""
        key = (src, dst)
        if key not in self._flows:
            self._flows[key] = geometric_flow(
                self.primitives, self.camera, self.poses[src], self.poses[dst], self.depths[src]
            )
        return self._flows[key]

    def render_view(self, pose: Pose):
        return render_primitives(self.primitives, self.camera, pose)

    def ray_depth(self, pose: Pose, pixels):
        """Exact ray distance to the first surface for given pixels."""
        dirs = _world_dirs(self.camera, pose, pixels)
        t, _ = cast(self.primitives, pose.translation, dirs)
        return t


def _world_dirs(cam: Camera, pose: Pose, pixels):
    d = backproject_points(cam, np.asarray(pixels, dtype=np.float64), 1.0)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d @ pose.rotation.T


def _cast_pixels(primitives, cam: Camera, pose: Pose, pix):
    dc = backproject_points(cam, pix, 1.0)
    norm = np.linalg.norm(dc, axis=-1)
    dirs = (dc / norm[:, None]) @ pose.rotation.T
    t, idx = cast(primitives, pose.translation, dirs)
    hit = np.isfinite(t)
    pts = pose.translation + np.where(hit, t, 0.0)[:, None] * dirs
    col = np.where(hit[:, None], shade(primitives, pts, idx), 0.0)
    return col, np.where(hit, t / norm, np.inf)


def render_primitives(primitives, cam: Camera, pose: Pose, supersample: int = 1):
    """Exact (image, z-depth) of a view; misses are black with inf depth.

    With ``supersample > 1`` the colour is box-filtered over an s x s grid of
    sub-pixel rays (anti-aliasing); depth is always the pixel-centre ray.
    """
    pix = cam.pixel_grid()
    col, z = _cast_pixels(primitives, cam, pose, pix)
    s = int(supersample)
    if s > 1:
        off = (np.arange(s) + 0.5) / s - 0.5
        acc = np.zeros_like(col)
        for dv in off:
            for du in off:
                acc += _cast_pixels(primitives, cam, pose, pix + [du, dv])[0]
        col = acc / (s * s)
    return col.reshape(cam.height, cam.width, 3), z.reshape(cam.height, cam.width)


def geometric_flow(primitives, cam: Camera, pose_src: Pose, pose_dst: Pose, depth_src):
    """Exact flow ``p_src - p_dst`` with visibility and bounds masks."""
    pix = cam.pixel_grid()
    d = np.asarray(depth_src, dtype=np.float64).ravel()
    ok = np.isfinite(d) & (d > 0)
    Xw = pose_src.apply(backproject_points(cam, pix, np.where(ok, d, 1.0)))
    Xd = pose_dst.inverse().apply(Xw)
    uv, front = project_points(cam, Xd)
    inb = cam.in_bounds(uv)
    # visibility: first hit from the destination centre must be the point itself
    ray = Xw - pose_dst.translation
    dist = np.linalg.norm(ray, axis=-1)
    dirs = ray / np.maximum(dist, 1e-12)[:, None]
    t, _ = cast(primitives, pose_dst.translation, dirs)
    visible = t >= dist * (1.0 - 1e-6) - 1e-6
    valid = ok & front & inb & visible
    flow = np.where(valid[:, None], pix - uv, 0.0)
    return flow.reshape(cam.height, cam.width, 2), valid.reshape(cam.height, cam.width)


def _parse_primitives(spec, rng):
    prims = []
    for p in spec.get("primitives", []):
        p = dict(p)
        kind = p.get("type")
        tex = make_texture(p.get("texture", {}), rng)
        if kind in ("box", "room"):
            rot = so3_exp(np.deg2rad(np.asarray(p.get("rotation_deg", [0, 0, 0]), dtype=np.float64)))
            half = np.asarray(p.get("half", p.get("size", [1, 1, 1])), dtype=np.float64)
            if "size" in p and "half" not in p:
                half = half / 2
            if np.any(half <= 0):
                raise BadSpec("box extents must be positive")
            prims.append(Box(np.asarray(p.get("center", [0, 0, 0]), dtype=np.float64), half, tex, rot, kind == "room"))
        elif kind == "sphere":
            r = float(p.get("radius", 1.0))
            if r <= 0:
                raise BadSpec("sphere radius must be positive")
            prims.append(Sphere(np.asarray(p.get("center", [0, 0, 0]), dtype=np.float64), r, tex))
        else:
            raise BadSpec(f"unknown primitive type {kind!r}")
    if not prims:
        raise BadSpec("scene needs at least one primitive")
    return prims


def camera_from_spec(spec) -> Camera:
    c = spec.get("camera", {})
    w = int(c.get("width", 64))
    h = int(c.get("height", 48))
    f = float(c.get("focal", 0.9 * w))
    return Camera(
        float(c.get("fx", f)), float(c.get("fy", f)),
        float(c.get("cx", (w - 1) / 2)), float(c.get("cy", (h - 1) / 2)), w, h,
    )


def make_scene(spec, seed: int = 0) -> SyntheticScene:
    """Deterministic scene from a primitive list and a trajectory script."""
    if not isinstance(spec, dict):
        raise BadSpec("scene spec must be a mapping")
    spec = copy.deepcopy(spec)
    rng = np.random.default_rng(seed)
    prims = _parse_primitives(spec, rng)
    if "trajectory" not in spec:
        raise BadSpec("scene spec needs a trajectory")
    poses = make_trajectory(spec["trajectory"])
    if len(poses) < 2:
        raise BadSpec("trajectory needs at least 2 poses")
    cam = camera_from_spec(spec)
    ss = int(spec.get("supersample", 1))
    imgs, deps = [], []
    for p in poses:
        im, dz = render_primitives(prims, cam, p, ss)
        imgs.append(im)
        deps.append(dz)
    return SyntheticScene(cam, poses, prims, np.array(imgs), np.array(deps), spec, seed)


def standard_room_spec(n_frames: int = 10, width: int = 96, height: int = 72, freq: float = 1.0,
                       trajectory=None) -> dict:
    """Textured room with a few objects; the camera starts at the origin looking +z."""
    tex = {"kind": "waves", "freq": freq, "amp": 0.35, "count": 8}
    return {
        "camera": {"width": width, "height": height, "focal": 0.9 * width},
        "supersample": 3,
        "primitives": [
            {"type": "room", "center": [0.0, 0.0, 1.5], "half": [5.0, 2.5, 3.0], "texture": tex},
            {"type": "box", "center": [-1.0, 0.8, 2.8], "half": [0.5, 0.7, 0.5], "rotation_deg": [0, 25, 0], "texture": tex},
            {"type": "box", "center": [1.6, -0.3, 3.2], "half": [0.4, 0.4, 0.4], "rotation_deg": [10, -30, 0], "texture": tex},
            {"type": "sphere", "center": [0.3, 0.4, 2.2], "radius": 0.45, "texture": tex},
        ],
        "trajectory": trajectory
        or {"type": "sweep", "start": [-0.4, 0.0, 0.0], "end": [0.4, 0.0, 0.0], "n": n_frames,
            "wiggle": [0.0, 0.1, 0.1], "yaw_deg": 3.0},
    }


def corrupt_depth(depth, rng, noise: float = 0.05, scale_range=(0.8, 1.25), shift_frac: float = 0.1):
    """Monocular-style prior: multiplicative noise plus a random affine map."""
    depth = np.asarray(depth, dtype=np.float64)
    ok = np.isfinite(depth) & (depth > 0)
    noisy = depth * (1.0 + noise * rng.standard_normal(depth.shape))
    a = np.exp(rng.uniform(np.log(scale_range[0]), np.log(scale_range[1])))
    mean = float(depth[ok].mean()) if ok.any() else 1.0
    b = rng.uniform(-shift_frac, shift_frac) * mean
    out = a * noisy + b
    return np.where(ok & (out > 0), out, 0.0)


# ---------------------------------------------------------------------------
# brute-force references


def dense_grid_reference(field_) -> np.ndarray:
    """Explicit ``(n, n, n, 1+F)`` grid summed from factor outer products."""
    n = field_.n
    if n > MAX_DENSE_RES:
        raise TooLarge(f"dense reference limited to n <= {MAX_DENSE_RES}, got {n}")
    L = np.asarray(field_.lines, dtype=np.float64)
    P = np.asarray(field_.planes, dtype=np.float64)
    out = np.zeros((n, n, n, field_.n_channels))
    for k, ch in enumerate(field_.comp_ch):
        out[..., ch] += np.einsum("i,jk->ijk", L[0, :, k], P[0, :, :, k])
        out[..., ch] += np.einsum("j,ik->ijk", L[1, :, k], P[1, :, :, k])
        out[..., ch] += np.einsum("k,ij->ijk", L[2, :, k], P[2, :, :, k])
    return out


def node_coords(n: int) -> np.ndarray:
    """Contracted-space coordinates of grid nodes along one axis."""
    return np.linspace(-2.0, 2.0, n)


def analytic_render_reference(segments, near: float = 0.0):
    """Closed-form colour, expected depth, opacity and per-segment weights
    for piecewise-constant density along a ray.

    ``segments`` is a sequence of ``(t0, t1, sigma, rgb)`` with disjoint,
    ascending intervals; gaps are empty space.
    """
    T = 1.0
    color = np.zeros(3)
    depth = 0.0
    weights = []
    for t0, t1, sigma, rgb in segments:
        L = t1 - t0
        tau = sigma * L
        a = -np.expm1(-tau)
        w = T * a
        weights.append(w)
        color += w * np.asarray(rgb, dtype=np.float64)
        if sigma > 0:
            # integral of t sigma exp(-sigma (t - t0)) over the segment
            depth += T * (t0 * a + (a - tau * np.exp(-tau)) / sigma)
        T *= np.exp(-tau)
    return color, depth, 1.0 - T, np.array(weights)


def sweep_room_spec(n_frames: int = 60, width: int = 96, height: int = 72, length: float = 5.5,
                    freq: float = 0.6) -> dict:
    """Long room with objects; the camera slides sideways along +x on a
    gently curved path while looking down +z."""
    tex = {"kind": "waves", "freq": freq, "amp": 0.35, "count": 8}
    cx = length / 2
    return {
        "camera": {"width": width, "height": height, "focal": 0.9 * width},
        "supersample": 3,
        "primitives": [
            {"type": "room", "center": [cx, 0.0, 1.5], "half": [length / 2 + 4.0, 2.2, 3.0], "texture": tex},
            {"type": "box", "center": [0.2, 0.9, 2.6], "half": [0.5, 0.6, 0.5], "rotation_deg": [0, 25, 0], "texture": tex},
            {"type": "sphere", "center": [1.6, 0.2, 3.0], "radius": 0.5, "texture": tex},
            {"type": "box", "center": [3.0, -0.4, 3.3], "half": [0.45, 0.45, 0.45], "rotation_deg": [10, -30, 0], "texture": tex},
            {"type": "box", "center": [4.3, 1.0, 2.4], "half": [0.6, 0.5, 0.4], "rotation_deg": [0, 40, 0], "texture": tex},
            {"type": "sphere", "center": [5.6, -0.3, 2.9], "radius": 0.55, "texture": tex},
        ],
        "trajectory": {"type": "sweep", "start": [0.0, 0.0, 0.0], "end": [length, 0.0, 0.0], "n": n_frames,
                       "wiggle": [0.0, 0.25, 0.35], "yaw_deg": 6.0, "pitch_deg": 2.0, "cycles": 1.0},
    }
