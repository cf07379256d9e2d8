import numpy as np
import pytest

from incrf.errors import EmptySampleSet
from incrf.geometry import Camera, Pose, Tangent, apply_update, so3_exp
from incrf.oracle import analytic_render_reference
from incrf.renderer import (
    Ray, RayBatch, SampleBatch, SampleSet, camera_rays, composite, composite_backward, generate_rays,
    pose_tangent_grad, render, render_backward, render_batch, sample_batch, sample_ray, surface_draws,
)
from incrf.triplane import TriplaneField

CAM = Camera(40.0, 40.0, 16.0, 12.0, 32, 24)


def rand_field(rng, n=8):
    return TriplaneField.random(n, rng, scale=0.5, rank=2, n_features=3, hidden=16, dtype=np.float64)


# -- compositing -----------------------------------------------------------------


def test_telescoping_identity():
    rng = np.random.default_rng(0)
    sigma = rng.exponential(2.0, size=(10_000, 64))
    delta = rng.uniform(0.0, 0.1, size=(10_000, 64))
    c = composite(sigma, rng.random((10_000, 64, 3)), np.cumsum(delta, 1), delta)
    assert np.abs(c.weights.sum(-1) - (1 - np.exp(-(sigma * delta).sum(-1)))).max() < 1e-10


def test_zero_density_samples_change_nothing():
    rng = np.random.default_rng(1)
    sigma, delta = rng.exponential(1.0, 20), rng.uniform(0.01, 0.1, 20)
    t, rgb = np.cumsum(delta), rng.random((20, 3))
    a = composite(sigma, rgb, t, delta)
    ins = 7
    s2, d2 = np.insert(sigma, ins, 0.0), np.insert(delta, ins, 0.05)
    t2, rgb2 = np.insert(t, ins, t[ins] - 1e-3), np.insert(rgb, ins, [0.9, 0.1, 0.5], axis=0)
    b = composite(s2, rgb2, t2, d2)
    assert np.abs(a.color - b.color).max() < 1e-12
    assert abs(a.opacity - b.opacity) < 1e-12


def test_opaque_first_sample_takes_its_colour():
    sigma = np.array([1e6, 1.0, 1.0])
    rgb = np.array([[0.2, 0.4, 0.6], [1, 1, 1], [1, 1, 1]])
    c = composite(sigma, rgb, np.array([1.0, 2, 3]), np.array([1.0, 1, 1]))
    assert np.allclose(c.color, rgb[0], atol=1e-12)
    assert np.isclose(c.depth, 1.0) and np.isclose(c.opacity, 1.0)


def test_empty_space_renders_black():
    c = composite(np.zeros(5), np.ones((5, 3)), np.arange(5.0), np.ones(5))
    assert np.allclose(c.color, 0) and c.opacity == 0


def test_transmittance_one_through_empty_space():
    c = composite(np.zeros(8), np.ones((8, 3)), np.arange(8.0), np.ones(8))
    assert np.all(c.transmittance == 1.0)
    c = composite(np.array([0.5, 2.0]), np.ones((2, 3)), np.arange(2.0), np.ones(2))
    assert c.transmittance[0] == 1.0


def test_two_half_transparent_segments():
    # two slabs each with optical depth ln 2, resolved with 128 samples apiece
    n = 256
    delta = np.full(n, 1.0 / n)
    sigma = np.full(n, 2 * np.log(2.0))
    c = composite(sigma, np.ones((n, 3)), (np.arange(n) + 0.5) / n, delta)
    assert np.isclose(c.weights[: n // 2].sum(), 0.5, atol=1e-12)
    assert np.isclose(c.weights[n // 2 :].sum(), 0.25, atol=1e-12)


def test_matches_piecewise_constant_reference():
    rng = np.random.default_rng(2)
    n, near, far = 256, 0.0, 4.0
    dt = (far - near) / n
    mids = near + (np.arange(n) + 0.5) * dt
    for _ in range(50):
        cuts = np.sort(rng.choice(np.arange(1, n), 7, replace=False))
        edges = np.concatenate([[0], cuts, [n]])
        segs, sigma, rgb = [], np.zeros(n), np.zeros((n, 3))
        for a, b in zip(edges[:-1], edges[1:]):
            s, c = (0.0 if rng.random() < 0.3 else rng.uniform(0.1, 3.0)), rng.random(3)
            segs.append((near + a * dt, near + b * dt, s, c))
            sigma[a:b], rgb[a:b] = s, c
        col, dep, opa, _ = analytic_render_reference(segs)
        out = composite(sigma, rgb, mids, np.full(n, dt))
        assert np.abs(out.color - col).max() < 1e-4
        assert abs(out.opacity - opa) < 1e-4
        assert abs(out.depth - dep) < 1e-4


def test_composite_backward_matches_fd():
    rng = np.random.default_rng(3)
    sigma, delta = rng.exponential(1.0, (4, 12)), rng.uniform(0.05, 0.2, (4, 12))
    t, rgb = np.cumsum(delta, 1), rng.random((4, 12, 3))
    gc, gd, go = rng.normal(size=(4, 3)), rng.normal(size=4), rng.normal(size=4)

    def f(s):
        c = composite(s, rgb, t, delta)
        return np.sum(gc * c.color) + np.sum(gd * c.depth) + np.sum(go * c.opacity)

    c = composite(sigma, rgb, t, delta)
    g_sigma, g_rgb = composite_backward(c, sigma, rgb, t, delta, None, gc, gd, go)
    h = 1e-6
    fd = np.zeros_like(sigma)
    for idx in np.ndindex(*sigma.shape):
        e = np.zeros_like(sigma)
        e[idx] = h
        fd[idx] = (f(sigma + e) - f(sigma - e)) / (2 * h)
    assert np.allclose(g_sigma, fd, rtol=1e-6, atol=1e-8)
    assert np.allclose(g_rgb, c.weights[..., None] * gc[:, None, :])


# -- rays ----------------------------------------------------------------------------


def test_centre_ray_identity_pose():
    r = generate_rays(CAM, Pose.identity(), [[16.0, 12.0]])[0]
    assert np.allclose(r.origin, 0) and np.allclose(r.direction, [0, 0, 1])


def test_centre_ray_half_turn_about_y():
    pose = Pose(so3_exp([0.0, np.pi, 0.0]), np.array([1.0, 2.0, 3.0]))
    r = generate_rays(CAM, pose, [[16.0, 12.0]])[0]
    assert np.allclose(r.origin, [1, 2, 3]) and np.allclose(r.direction, [0, 0, -1], atol=1e-12)


def test_ray_directions_unit_and_z_scale():
    rng = np.random.default_rng(4)
    pose = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
    rb = camera_rays(CAM, pose, CAM.pixel_grid(), 0.1, 5.0)
    assert np.allclose(np.linalg.norm(rb.dirs, axis=1), 1)
    # camera-frame z of a unit ray step equals z_scale
    zc = (rb.dirs @ pose.rotation)[:, 2]
    assert np.allclose(zc, rb.z_scale)


# -- sampling -----------------------------------------------------------------------


def test_surface_draw_statistics():
    rng = np.random.default_rng(5)
    x = surface_draws(4.0, 0.1, 10_000, rng)
    assert abs(x.mean() - 4.0) < 0.01
    assert abs(x.std() - 0.1) < 0.01


def test_sample_ray_sorted_within_bounds():
    rng = np.random.default_rng(6)
    r = Ray(np.zeros(3), np.array([0, 0, 1.0]), 0.5, 4.0)
    s = sample_ray(r, 2.0, None, rng, n_strat=32, n_surface=8)
    assert len(s) == 40
    assert np.all(np.diff(s.depths) >= 0)
    assert s.depths.min() >= 0.5 and s.depths.max() <= 4.0
    assert np.all(s.deltas > 0)
    near_guide = s.depths[s.sources == 1]
    assert np.all(np.abs(near_guide - 2.0) < 0.02 * 3.5 * 6)


def test_sample_ray_falls_back_to_rendered_depth():
    rng = np.random.default_rng(7)
    r = Ray(np.zeros(3), np.array([0, 0, 1.0]), 0.5, 4.0)
    s = sample_ray(r, np.nan, 3.0, rng, n_strat=16, n_surface=64)
    assert abs(np.mean(s.depths[s.sources == 1]) - 3.0) < 0.05
    s = sample_ray(r, None, None, rng, n_strat=16, n_surface=64)
    assert len(s) == 16


def test_stratified_one_per_bin():
    rng = np.random.default_rng(8)
    rb = RayBatch.from_rays([Ray(np.zeros(3), np.array([1.0, 0, 0]), 0.0, 1.0)] * 3)
    sb = sample_batch(rb, [np.nan] * 3, rng, n_strat=10, n_surface=4)
    assert np.all(sb.mask.sum(1) == 10)
    for i in range(3):
        assert np.all(np.floor(sb.to_set(i).depths * 10) == np.arange(10))


def test_empty_sample_set_raises():
    rng = np.random.default_rng(9)
    f = rand_field(rng)
    r = Ray(np.zeros(3), np.array([0, 0, 1.0]), 0.1, 2.0)
    with pytest.raises(EmptySampleSet):
        render(f, r, SampleSet(np.zeros(0), np.zeros(0), np.zeros(0, np.int8)))


def test_single_and_batched_render_agree():
    rng = np.random.default_rng(10)
    f = rand_field(rng)
    rays = generate_rays(CAM, Pose.identity(), [[3.0, 4.0], [20.0, 10.0]], 0.1, 3.0)
    sets = [sample_ray(r, 1.0, None, rng, 16, 4) for r in rays]
    st = render_batch(f, RayBatch.from_rays(rays), SampleBatch.from_sets(sets))
    for i, (r, s) in enumerate(zip(rays, sets)):
        c, d, o = render(f, r, s)
        assert np.allclose(c, st.color[i]) and np.isclose(d, st.depth[i]) and np.isclose(o, st.opacity[i])


# -- gradients ------------------------------------------------------------------------


def _setup(seed):
    rng = np.random.default_rng(seed)
    f = rand_field(rng)
    pose = Pose(so3_exp(rng.normal(scale=0.2, size=3)), rng.normal(scale=0.2, size=3))
    pix = rng.uniform([0, 0], [32, 24], size=(8, 2))
    rb = camera_rays(CAM, pose, pix, 0.1, 3.0)
    smp = sample_batch(rb, rng.uniform(0.5, 2.5, 8), rng, 24, 8)
    gc, gd = rng.normal(size=(8, 3)), rng.normal(size=8)
    return f, pose, pix, smp, gc, gd


def _objective(f, rb, smp, gc, gd):
    st = render_batch(f, rb, smp)
    return float(np.sum(gc * st.color) + np.sum(gd * st.depth))


@pytest.mark.parametrize("seed", range(5))
def test_factor_gradients_match_fd(seed):
    f, pose, pix, smp, gc, gd = _setup(seed)
    rb = camera_rays(CAM, pose, pix, 0.1, 3.0)
    g = render_backward(render_batch(f, rb, smp), gc, gd, want_rays=False).field
    rng = np.random.default_rng(100 + seed)
    h = 1e-6
    for name in ("lines", "planes"):
        arr, ga = getattr(f, name), getattr(g, name)
        flat = np.flatnonzero(np.abs(ga) > 1e-4 * np.abs(ga).max())
        for idx in rng.choice(flat, size=min(6, flat.size), replace=False):
            old = arr.flat[idx]
            arr.flat[idx] = old + h
            lp = _objective(f, rb, smp, gc, gd)
            arr.flat[idx] = old - h
            lm = _objective(f, rb, smp, gc, gd)
            arr.flat[idx] = old
            fd = (lp - lm) / (2 * h)
            assert abs(fd - ga.flat[idx]) < 1e-4 * abs(fd), (name, idx, fd, ga.flat[idx])


@pytest.mark.parametrize("seed", range(5))
def test_pose_gradient_matches_fd(seed):
    f, pose, pix, smp, gc, gd = _setup(seed)
    rb = camera_rays(CAM, pose, pix, 0.1, 3.0)
    g = render_backward(render_batch(f, rb, smp), gc, gd, want_rays=True)
    an = pose_tangent_grad(rb, g.origins, g.dirs)
    h = 1e-6
    fd = np.zeros(6)
    for j in range(6):
        e = np.zeros(6)
        e[j] = h
        vals = []
        for s in (1, -1):
            p = apply_update(pose, Tangent(s * e[:3], s * e[3:]))
            vals.append(_objective(f, camera_rays(CAM, p, pix, 0.1, 3.0), smp, gc, gd))
        fd[j] = (vals[0] - vals[1]) / (2 * h)
    assert np.linalg.norm(an - fd) < 1e-3 * np.linalg.norm(fd)
