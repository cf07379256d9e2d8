import numpy as np
import pytest

from incrf.errors import BadSpec, TooLarge
from incrf.fba import bilinear
from incrf.geometry import Pose
from incrf.oracle import (
    Box, Sphere, Texture, cast, corrupt_depth, dense_grid_reference, look_at, make_scene, make_trajectory,
    standard_room_spec, sweep_room_spec,
)
from incrf.triplane import TriplaneField


@pytest.fixture(scope="module")
def scene():
    return make_scene(standard_room_spec(n_frames=4, width=64, height=48), seed=3)


def test_scene_deterministic(scene):
    again = make_scene(standard_room_spec(n_frames=4, width=64, height=48), seed=3)
    assert np.array_equal(scene.images, again.images)
    assert np.array_equal(scene.depths, again.depths)
    other = make_scene(standard_room_spec(n_frames=4, width=64, height=48), seed=4)
    assert not np.array_equal(scene.images, other.images)


def test_room_encloses_camera(scene):
    assert np.all(np.isfinite(scene.depths)) and np.all(scene.depths > 0)
    assert scene.images.min() >= 0 and scene.images.max() <= 1


def test_flow_warp_consistency(scene):
    # sampling the target image where the flow sends each source pixel
    # reproduces the source (view-independent shading, exact geometry)
    pix = scene.camera.pixel_grid()
    for a, b in [(0, 1), (2, 1)]:
        flow, valid = scene.flow(a, b)
        uv = pix - flow.reshape(-1, 2)
        warped = bilinear(scene.images[b], uv)
        err = np.abs(warped - scene.images[a].reshape(-1, 3)).max(-1)[valid.ravel()]
        assert valid.mean() > 0.7
        assert np.median(err) < 0.02
        assert np.mean(err) < 0.02


def test_sphere_intersection_hand_value():
    s = Sphere(np.array([0.0, 0, 5]), 1.0, Texture(np.ones(3)))
    t = s.intersect(np.zeros((1, 3)), np.array([[0.0, 0, 1]]))
    assert np.isclose(t[0], 4.0)
    assert np.isinf(s.intersect(np.zeros((1, 3)), np.array([[1.0, 0, 0]]))[0])


def test_box_inside_and_outside():
    b = Box(np.zeros(3), np.ones(3), Texture(np.ones(3)))
    d = np.array([[1.0, 0, 0]])
    assert np.isclose(b.intersect(np.array([[-3.0, 0, 0]]), d)[0], 2.0)
    room = Box(np.zeros(3), np.ones(3), Texture(np.ones(3)), inside=True)
    assert np.isclose(room.intersect(np.zeros((1, 3)), d)[0], 1.0)


def test_cast_nearest_primitive():
    near = Sphere(np.array([0.0, 0, 3]), 0.5, Texture(np.ones(3)))
    far = Sphere(np.array([0.0, 0, 6]), 0.5, Texture(np.ones(3)))
    t, idx = cast([far, near], np.zeros(3), np.array([[0.0, 0, 1]]))
    assert np.isclose(t[0], 2.5) and idx[0] == 1


def test_depth_is_camera_z(scene):
    pose = scene.poses[1]
    pix = np.array([[3.0, 4.0], [40.0, 30.0]])
    t = scene.ray_depth(pose, pix)
    dc = np.c_[(pix - [scene.camera.cx, scene.camera.cy]) / [scene.camera.fx, scene.camera.fy], np.ones(2)]
    z = t / np.linalg.norm(dc, axis=1)
    assert np.allclose(z, scene.depths[1][pix[:, 1].astype(int), pix[:, 0].astype(int)])


def test_look_at_axes():
    p = look_at([0, 0, -2], [0, 0, 0])
    assert np.allclose(p.rotation, np.eye(3)) and np.allclose(p.translation, [0, 0, -2])


def test_sweep_trajectory_spans_length():
    poses = make_trajectory(sweep_room_spec()["trajectory"])
    assert len(poses) == 60
    assert np.allclose(poses[0].translation, 0) and np.allclose(poses[-1].translation, [5.5, 0, 0], atol=1e-9)
    assert all(p.is_valid() for p in poses)


def test_bad_specs():
    with pytest.raises(BadSpec):
        make_trajectory({"type": "spiral", "n": 5})
    with pytest.raises(BadSpec):
        make_trajectory({"type": "line", "n": 1, "start": [0, 0, 0], "end": [1, 0, 0]})
    with pytest.raises(BadSpec):
        make_scene([1, 2, 3])


def test_corrupt_depth_is_affine_plus_noise():
    rng = np.random.default_rng(0)
    d = rng.uniform(1, 4, (40, 50))
    d[0, 0] = np.inf
    c = corrupt_depth(d, rng, noise=0.0)
    assert c[0, 0] == 0
    m = c > 0
    A = np.c_[d[m], np.ones(m.sum())]
    coef, res, *_ = np.linalg.lstsq(A, c[m], rcond=None)
    assert 0.8 <= coef[0] <= 1.25 and res[0] < 1e-12
    noisy = corrupt_depth(d, np.random.default_rng(1), noise=0.05, scale_range=(1, 1), shift_frac=0)
    rel = noisy[m] / d[m] - 1
    assert abs(rel.std() - 0.05) < 0.005


def test_dense_reference_size_limit():
    f = TriplaneField.random(64, np.random.default_rng(0), rank=1, n_features=1, hidden=4)
    with pytest.raises(TooLarge):
        dense_grid_reference(f)


def test_box_orbit_depth_is_analytic():
    spec = {
        "primitives": [{"type": "box", "half": [0.5, 0.4, 0.6], "texture": {"type": "checker"}}],
        "trajectory": {"type": "orbit", "n": 4, "radius": 3.0, "arc_deg": 120.0},
        "camera": {"width": 33, "height": 25, "focal": 30.0},
    }
    sc = make_scene(spec, seed=0)
    cam, half = sc.camera, np.array([0.5, 0.4, 0.6])
    pix = cam.pixel_grid()
    dc = np.c_[(pix - [cam.cx, cam.cy]) / [cam.fx, cam.fy], np.ones(len(pix))]
    for pose, dep in zip(sc.poses, sc.depths):
        # slab test with camera-z-normalised directions: the ray parameter is z
        d = dc @ pose.rotation.T
        o = pose.translation
        with np.errstate(divide="ignore", invalid="ignore"):
            t1, t2 = (-half - o) / d, (half - o) / d
        tn = np.minimum(t1, t2).max(-1)
        tf = np.maximum(t1, t2).min(-1)
        z = np.where((tn <= tf) & (tn > 0), tn, np.inf).reshape(cam.height, cam.width)
        assert np.array_equal(np.isfinite(z), np.isfinite(dep))
        m = np.isfinite(z)
        assert m.sum() > 50 and np.allclose(z[m], dep[m], atol=1e-9)
    # centre pixel of the first view looks straight at the near face
    assert np.isclose(sc.depths[0][12, 16], 3.0 - 0.6)
