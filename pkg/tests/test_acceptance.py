"""Acceptance suite: one test per criterion, each at its stated tolerance.

Every test records a one-line verdict (printed in the session summary by
``conftest.py``) before asserting, so failures are reported with the
measured numbers rather than hidden.
"""
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from incrf import fba
from incrf.config import ReconConfig
from incrf.geometry import Camera, Pose, Tangent, apply_update, interpolate_pose, rotation_angle, se3_exp, so3_exp
from incrf.incremental import Frame, IncrementalReconstructor
from incrf.losses import induced_flow, normalize_depth
from incrf.oracle import (
    analytic_render_reference, dense_grid_reference, make_scene, node_coords, standard_room_spec, sweep_room_spec,
)
from incrf.pipeline import run as pipeline
from incrf.pipeline.dataset import load_dataset, write_dataset
from incrf.renderer import camera_rays, composite, pose_tangent_grad, render_backward, render_batch, sample_batch
from incrf.triplane import TriplaneField

# settings of the end-to-end runs (criteria 10 and 11)
E2E_FRAMES = 60
E2E_CONFIG = dict(bound_radius=0.8, lr_rot=1e-3, lr_trans=1e-4)


def verdict(record, n, title, detail):
    record("criterion", (n, title, detail))
    print(f"criterion {n:2d}  {title}: {detail}")


# -- 1 ---------------------------------------------------------------------------------------


def test_c01_factorisation_matches_dense_oracle(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(20):
        R, n, F = int(rng.integers(1, 5)), int(rng.integers(2, 9)), int(rng.integers(1, 4))
        f = TriplaneField.random(n, rng, scale=1.0, rank=R, n_features=F, hidden=4, dtype=np.float64)
        dense = dense_grid_reference(f)
        c = node_coords(n)
        grid = np.stack(np.meshgrid(c, c, c, indexing="ij"), -1).reshape(-1, 3)
        worst = max(worst, float(np.abs(f.grid_values(grid).reshape(dense.shape) - dense).max()))
    dt = time.perf_counter() - t0
    verdict(record_property, 1, "tri-plane vs dense oracle", f"max err {worst:.2e} (< 1e-6), {dt:.2f}s (< 5s)")
    assert worst < 1e-6 and dt < 5


# -- 2 ---------------------------------------------------------------------------------------


def test_c02_parameter_scaling(record_property):
    t0 = time.perf_counter()
    exact = all(
        TriplaneField(n, rank=R, n_features=F, hidden=4).param_count() == (1 + F) * R * (3 * n + 3 * n * n)
        for n, R, F in [(4, 1, 1), (8, 4, 12), (16, 2, 3), (32, 4, 8), (48, 3, 5)]
    )
    ratios = [TriplaneField(2 * n, rank=4, n_features=8, hidden=4).param_count()
              / TriplaneField(n, rank=4, n_features=8, hidden=4).param_count() for n in (32, 64, 128)]
    dt = time.perf_counter() - t0
    ok = exact and all(3.9 <= r <= 4.1 for r in ratios) and dt < 1
    verdict(record_property, 2, "parameter scaling",
            f"formula exact={exact}, doubling ratios {np.round(ratios, 3).tolist()} (in [3.9, 4.1]), {dt:.2f}s")
    assert ok


# -- 3 ---------------------------------------------------------------------------------------


def test_c03_rendering_correctness(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    n, near, far = 256, 0.0, 4.0
    dt_ = (far - near) / n
    mids = near + (np.arange(n) + 0.5) * dt_
    worst = 0.0
    for _ in range(100):
        edges = np.concatenate([[0], np.sort(rng.choice(np.arange(1, n), 7, replace=False)), [n]])
        segs, sigma, rgb = [], np.zeros(n), np.zeros((n, 3))
        for a, b in zip(edges[:-1], edges[1:]):
            s, c = (0.0 if rng.random() < 0.3 else rng.uniform(0.1, 3.0)), rng.random(3)
            segs.append((near + a * dt_, near + b * dt_, s, c))
            sigma[a:b], rgb[a:b] = s, c
        col, dep, opa, _ = analytic_render_reference(segs)
        out = composite(sigma, rgb, mids, np.full(n, dt_))
        worst = max(worst, np.abs(out.color - col).max(), abs(out.depth - dep), abs(out.opacity - opa))
    sig = rng.exponential(2.0, size=(10_000, 64))
    delta = rng.uniform(0.0, 0.1, size=(10_000, 64))
    c = composite(sig, rng.random((10_000, 64, 3)), np.cumsum(delta, 1), delta)
    tele = float(np.abs(c.weights.sum(-1) - (1 - np.exp(-(sig * delta).sum(-1)))).max())
    dt = time.perf_counter() - t0
    verdict(record_property, 3, "rendering correctness",
            f"reference err {worst:.2e} (< 1e-4), telescoping {tele:.1e} (< 1e-10), {dt:.1f}s (< 10s)")
    assert worst < 1e-4 and tele < 1e-10 and dt < 10


# -- 4 ---------------------------------------------------------------------------------------


CAM4 = Camera(40.0, 40.0, 16.0, 12.0, 32, 24)


def _objective(f, rb, smp, gc, gd):
    st = render_batch(f, rb, smp)
    return float(np.sum(gc * st.color) + np.sum(gd * st.depth))


def test_c04_gradients_match_finite_differences(record_property):
    t0 = time.perf_counter()
    worst_f = worst_p = 0.0
    h = 1e-6
    for seed in range(5):
        rng = np.random.default_rng(40 + seed)
        f = TriplaneField.random(8, rng, scale=0.5, rank=2, n_features=3, hidden=16, dtype=np.float64)
        pose = Pose(so3_exp(rng.normal(scale=0.2, size=3)), rng.normal(scale=0.2, size=3))
        pix = rng.uniform([0, 0], [32, 24], size=(8, 2))
        rb = camera_rays(CAM4, pose, pix, 0.1, 3.0)
        smp = sample_batch(rb, rng.uniform(0.5, 2.5, 8), rng, 24, 8)
        gc, gd = rng.normal(size=(8, 3)), rng.normal(size=8)
        g = render_backward(render_batch(f, rb, smp), gc, gd, want_rays=True)
        for name in ("lines", "planes"):
            arr, ga = getattr(f, name), getattr(g.field, name)
            flat = np.flatnonzero(np.abs(ga) > 1e-4 * np.abs(ga).max())
            for idx in rng.choice(flat, size=min(10, flat.size), replace=False):
                old = arr.flat[idx]
                arr.flat[idx] = old + h
                lp = _objective(f, rb, smp, gc, gd)
                arr.flat[idx] = old - h
                lm = _objective(f, rb, smp, gc, gd)
                arr.flat[idx] = old
                fd = (lp - lm) / (2 * h)
                worst_f = max(worst_f, abs(fd - ga.flat[idx]) / abs(fd))
        an = pose_tangent_grad(rb, g.origins, g.dirs)
        fd = np.zeros(6)
        for j in range(6):
            e = np.zeros(6)
            e[j] = h
            vals = [_objective(f, camera_rays(CAM4, apply_update(pose, Tangent(s * e[:3], s * e[3:])), pix, 0.1, 3.0),
                               smp, gc, gd) for s in (1, -1)]
            fd[j] = (vals[0] - vals[1]) / (2 * h)
        worst_p = max(worst_p, np.linalg.norm(an - fd) / np.linalg.norm(fd))
    dt = time.perf_counter() - t0
    verdict(record_property, 4, "analytic vs finite-difference gradients",
            f"factors rel {worst_f:.1e} (< 1e-4), pose rel {worst_p:.1e} (< 1e-3), {dt:.1f}s (< 30s)")
    assert worst_f < 1e-4 and worst_p < 1e-3 and dt < 30


# -- 5 ---------------------------------------------------------------------------------------


def test_c05_feature_metric_alignment(record_property):
    t0 = time.perf_counter()
    sc = make_scene(standard_room_spec(n_frames=9, width=96, height=72), seed=0)
    rng = np.random.default_rng(5)
    cfg = ReconConfig()
    pyr = [fba.build_pyramid(im, cfg.fba_levels, blur=cfg.fba_blur) for im in sc.images]
    ok = 0
    monotone = True
    for trial in range(100):
        k = trial % 8
        scale = float(np.median(sc.depths[k]))
        corr = fba.make_correspondences(sc.camera, sc.poses[k], sc.depths[k], stride=cfg.fba_stride)
        gt = sc.poses[k + 1].inverse()
        ax, tr = rng.normal(size=3), rng.normal(size=3)
        init = Pose(so3_exp(ax / np.linalg.norm(ax) * np.deg2rad(rng.uniform(0, 10))),
                    tr / np.linalg.norm(tr) * rng.uniform(0, 0.1) * scale) @ gt
        try:
            est, diag = fba.align(pyr[k], pyr[k + 1], corr, init, sc.camera)
        except fba.AlignmentError:
            continue
        rot = np.rad2deg(rotation_angle((est @ gt.inverse()).rotation))
        trans = np.linalg.norm(est.inverse().translation - gt.inverse().translation)
        ok += rot < 0.1 and trans < 1e-3 * scale
        monotone &= all(r["error"] <= r["prev_error"] for r in diag.records if r.get("accepted") and "prev_error" in r)
    dt = time.perf_counter() - t0
    verdict(record_property, 5, "feature-metric alignment",
            f"{ok}/100 converged (>= 95), accepted steps monotone={monotone}, {dt:.0f}s (< 120s)")
    assert ok >= 95 and monotone and dt < 120


# -- 6 ---------------------------------------------------------------------------------------


CAM6 = Camera(50.0, 50.0, 31.5, 23.5, 64, 48)


def test_c06_pose_supervision_loss(record_property):
    rng = np.random.default_rng(6)
    zero, nonincreasing = True, 0
    for _ in range(20):
        gt = se3_exp(Tangent(rng.normal(scale=0.1, size=3), rng.normal(scale=0.1, size=3)))
        pts = gt.inverse().apply(rng.uniform([-1, -1, 2], [1, 1, 5], size=(40, 3)))
        zero &= fba.fba_loss([gt] * 3, gt, pts, CAM6) == 0.0
        start = []
        for _ in range(3):
            ax, tr = rng.normal(size=3), rng.normal(size=3)
            start.append(Pose(so3_exp(ax / np.linalg.norm(ax) * np.deg2rad(8)), 0.2 * tr / np.linalg.norm(tr)) @ gt)
        vals = [fba.fba_loss([interpolate_pose(s, gt, a) for s in start], gt, pts, CAM6) for a in np.linspace(0, 1, 10)]
        nonincreasing += all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))
    verdict(record_property, 6, "pose-supervision loss",
            f"zero at ground truth={zero}, nonincreasing on {nonincreasing}/20 geodesics")
    assert zero and nonincreasing == 20


# -- 7 ---------------------------------------------------------------------------------------


def test_c07_depth_normalisation(record_property):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        D = rng.uniform(0.5, 10, 64)
        a, b = np.exp(rng.uniform(-3, 3)), rng.uniform(-10, 10)
        worst = max(worst, float(np.abs(normalize_depth(a * D + b).values - normalize_depth(D).values).max()))
    hand = normalize_depth([1.0, 2.0, 3.0, 4.0]).values
    hand_ok = bool(np.allclose(hand, [-1.5, -0.5, 0.5, 1.5], atol=1e-12))
    verdict(record_property, 7, "depth normalisation",
            f"affine invariance max err {worst:.1e} (< 1e-8), [1,2,3,4] -> {hand.tolist()}")
    assert worst < 1e-8 and hand_ok


# -- 8 ---------------------------------------------------------------------------------------


def test_c08_flow_consistency(record_property):
    sc = make_scene(standard_room_spec(n_frames=6, width=96, height=72), seed=8)
    cam, pix = sc.camera, sc.camera.pixel_grid()
    errs = []
    for a, b in [(0, 1), (1, 0), (2, 4), (5, 3), (1, 5)]:
        ref, valid = sc.flow(a, b)
        f, ok = induced_flow(sc.poses[b].inverse() @ sc.poses[a], sc.depths[a], cam, pix)
        m = valid.ravel() & ok
        errs.append(float(np.mean(np.linalg.norm(f[m] - ref.reshape(-1, 2)[m], axis=-1))))
    verdict(record_property, 8, "induced vs geometric flow", f"mean err per pair {', '.join(f'{e:.1e}' for e in errs)} px (< 0.05)")
    assert max(errs) < 0.05


# -- 9 ---------------------------------------------------------------------------------------


TINY = Camera(12.0, 12.0, 7.5, 5.5, 16, 12)
TRACE_CFG = ReconConfig(
    coarse_res=4, fine_res=8, rank=1, app_rank=1, n_features=2, hidden=4, half_extent=1.0, bound_radius=1.0,
    overlap=2, init_iters=0, register_iters=0, refine_iters_per_frame=0, use_fba=False, dtype="float64",
)


class Scripted(IncrementalReconstructor):
    """Bookkeeping only: poses come from a script, optimisation is off."""

    def __init__(self, cfg, script):
        super().__init__(cfg, TINY, [Frame(i, np.zeros((12, 16, 3))) for i in range(len(script))])
        self.script, self.checksums, self.immutable = script, {}, True

    def register_frame(self, q):
        super().register_frame(q)
        self.state.poses[q] = self.script[q]

    def check_bound_and_allocate(self):
        reg = super().check_bound_and_allocate()
        for j, e in enumerate(reg):
            if e.frozen:
                self.immutable &= self.checksums.setdefault(j, e.checksum) == e.field.checksum()
        return reg


def _line(xs):
    return [Pose(np.eye(3), np.array([x, 0.0, 0.0])) for x in xs]


def _hand_simulation(xs, bound, overlap):
    """Independent straight-line walk of the allocation loop."""
    events, centre, start = [("allocate", 0, 0)], xs[0], 0
    j = 0
    for q in range(1, len(xs)):
        if abs(xs[q] - centre) >= bound:
            events.append(("freeze", j, q))
            start = max(start, q - overlap + 1)
            j += 1
            events += [("allocate", j, q), ("window", start)]
            centre = xs[q]
    events.append(("freeze", j, len(xs) - 1))
    return events


def test_c09_allocation_trace(record_property):
    scripts = {
        "line": np.arange(21) * 0.25,
        "out-and-back": np.array([0.0, 0.5, 1.1, 0.6, 0.2, 0.0, -0.3]),
        "long steps": np.arange(9) * 0.5,
    }
    matches, immutable = [], True
    for name, xs in scripts.items():
        rec = Scripted(TRACE_CFG, _line(xs))
        rec.run()
        matches.append(rec.events == _hand_simulation(list(xs), TRACE_CFG.bound, TRACE_CFG.overlap))
        immutable &= rec.immutable and all(e.field.checksum() == e.checksum for e in rec.registry)
    short, long = Scripted(TRACE_CFG, _line(np.arange(30) * 0.25)), Scripted(TRACE_CFG, _line(np.arange(120) * 0.25))
    short.run()
    long.run()
    ratio = long.state.peak_params / short.state.peak_params
    verdict(record_property, 9, "allocation trace",
            f"traces match {sum(matches)}/3, frozen checksums immutable={immutable}, peak params 120/30 = {ratio:.2f} (<= 1.2)")
    assert all(matches) and immutable and ratio <= 1.2


# -- 10 and 11 ----------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def e2e_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    write_dataset(make_scene(sweep_room_spec(n_frames=E2E_FRAMES), seed=0), root / "data", seed=0)
    return root


@lru_cache(maxsize=None)
def _e2e(root: str, variant: str):
    overrides = dict(E2E_CONFIG)
    if variant == "no-depth":
        overrides["w_depth"] = 0.0
    elif variant == "no-align":
        overrides["use_fba"] = False
    ds = load_dataset(Path(root) / "data")
    t0 = time.perf_counter()
    _, reg, rep = pipeline.run(ReconConfig(**overrides), ds, Path(root) / variant)
    return {"ate_ratio": rep.ate / rep.trajectory_length, "psnr": rep.psnr, "ssim": rep.ssim,
            "fields": len(reg), "minutes": (time.perf_counter() - t0) / 60}


@pytest.mark.slow
def test_c10_end_to_end_reconstruction(record_property, e2e_dataset):
    r = _e2e(str(e2e_dataset), "full")
    ok = r["ate_ratio"] < 0.01 and r["psnr"] > 25 and r["ssim"] > 0.8 and r["fields"] >= 3 and r["minutes"] < 15
    verdict(record_property, 10, "end-to-end synthetic reconstruction",
            f"ATE {100 * r['ate_ratio']:.2f}% of length (< 1%), PSNR {r['psnr']:.2f} dB (> 25), "
            f"SSIM {r['ssim']:.3f} (> 0.8), {r['fields']} fields (>= 3), {r['minutes']:.1f} min (< 15)")
    assert ok


@pytest.mark.slow
def test_c11_ablations_degrade(record_property, e2e_dataset):
    full = _e2e(str(e2e_dataset), "full")
    worse = {}
    for v in ("no-depth", "no-align"):
        r = _e2e(str(e2e_dataset), v)
        worse[v] = (r["ate_ratio"] > full["ate_ratio"], r["psnr"] < full["psnr"], r)
    detail = "; ".join(
        f"{v}: ATE {100 * r['ate_ratio']:.2f}% vs {100 * full['ate_ratio']:.2f}%, "
        f"PSNR {r['psnr']:.2f} vs {full['psnr']:.2f}" for v, (_, _, r) in worse.items()
    )
    verdict(record_property, 11, "ablations degrade ATE and PSNR", detail)
    assert all(a and p for a, p, _ in worse.values())


# -- 12 ----------------------------------------------------------------------------------------


SMALL_CONFIG = dict(
    coarse_res=8, fine_res=16, rank=2, app_rank=1, n_features=4, hidden=8, init_iters=20, register_iters=5,
    refine_iters_per_frame=2, rays_per_iter=64, n_strat=16, n_surface=4, eval_strat=16, eval_refine_iters=3,
    bound_radius=0.3,
)


def test_c12_determinism(record_property, tmp_path):
    spec = sweep_room_spec(n_frames=10, width=32, height=24, length=1.5)
    write_dataset(make_scene(spec, seed=1), tmp_path / "data", seed=1)
    ds = load_dataset(tmp_path / "data")
    outs = []
    for k in range(2):
        pipeline.run(ReconConfig(**SMALL_CONFIG), load_dataset(tmp_path / "data"), tmp_path / f"run{k}")
        outs.append(tmp_path / f"run{k}")
    traj = (outs[0] / "trajectory.txt").read_bytes() == (outs[1] / "trajectory.txt").read_bytes()
    files = sorted(p.name for p in (outs[0] / "fields").glob("*.bin"))
    fields = files == sorted(p.name for p in (outs[1] / "fields").glob("*.bin")) and all(
        (outs[0] / "fields" / n).read_bytes() == (outs[1] / "fields" / n).read_bytes() for n in files
    )
    verdict(record_property, 12, "determinism",
            f"trajectory identical={traj}, {len(files)} checkpoints identical={fields} ({len(ds.train)} frames)")
    assert traj and fields and len(files) >= 2
