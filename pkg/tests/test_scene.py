"""Analytic SDF scenes, sphere tracing, and the volume-blending helpers."""

import numpy as np
import pytest

from neisf import autodiff as ad
from neisf import scene as sc


@pytest.fixture
def box_scene():
    return sc.two_sphere_box()


# -- shapes ------------------------------------------------------------------

def test_sphere_distance():
    s = sc.Sphere(np.array([1.0, 0.0, 0.0]), 0.5)
    p = np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [1.0, 0.5, 0.0]])
    np.testing.assert_allclose(s.distance(p), [-0.5, 0.5, 0.0], atol=1e-15)


def test_box_distance():
    b = sc.Box(np.zeros(3), np.array([1.0, 2.0, 3.0]))
    p = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [2.0, 3.0, 0.0]])
    np.testing.assert_allclose(b.distance(p), [-1.0, 1.0, np.sqrt(2.0)], atol=1e-15)


def test_plane_distance():
    pl = sc.Plane(np.array([0.0, 1.0, 0.0]), -1.0)
    p = np.array([[0.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, -2.0, 0.0]])
    np.testing.assert_allclose(pl.distance(p), [1.0, 0.0, -1.0], atol=1e-15)


def test_union_and_smooth_union():
    a = sc.Sphere(np.array([-1.0, 0.0, 0.0]), 0.5)
    b = sc.Sphere(np.array([1.0, 0.0, 0.0]), 0.5)
    u = sc.Union((a, b))
    p = np.array([[-1.0, 0.0, 0.0], [1.2, 0.0, 0.0]])
    np.testing.assert_allclose(u.distance(p), [-0.5, -0.3], atol=1e-15)
    su = sc.SmoothUnion(a, b, 0.3)
    far = np.array([[5.0, 0.0, 0.0]])
    # smooth union agrees with min when shapes are far apart
    np.testing.assert_allclose(su.distance(far), u.distance(far), atol=1e-12)
    mid = np.array([[0.0, 0.0, 0.0]])
    assert su.distance(mid)[0] <= u.distance(mid)[0]   # blending only removes material


# -- scene queries ----------------------------------------------------------------

def test_scene_sdf_picks_nearest_object(box_scene):
    center_a = box_scene.objects[6].shape.center
    d, ids = box_scene.sdf(center_a[None, :])
    assert ids[0] == 6
    assert d[0] == pytest.approx(-0.38, abs=1e-12)


def test_normal_matches_analytic_sphere(box_scene):
    sph = box_scene.objects[6].shape
    rng = np.random.default_rng(0)
    v = rng.standard_normal((200, 3))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    p = sph.center + sph.radius * v
    n = box_scene.normal(p)
    dots = np.sum(n * v, axis=-1)
    assert np.all(dots > 1.0 - 1e-6)


def test_normal_degenerate_raises():
    s = sc.SceneModel("one", (sc.SceneObject("s", sc.Sphere(np.zeros(3), 1.0)),))
    with pytest.raises(sc.DegenerateGradient):
        s.normal(np.zeros((1, 3)))   # gradient vanishes at the center


def test_materials_at_checker_and_emitter(box_scene):
    sph = box_scene.objects[6]
    tex = sph.albedo
    p = np.array([[0.05, 0.05, 0.05], [0.05 + 1.0 / 6.0, 0.05, 0.05]])
    rgb = tex.sample(p)
    assert not np.allclose(rgb[0], rgb[1])   # adjacent cells differ
    light_p = box_scene.objects[5].shape.center[None, :]
    mats = box_scene.materials_at(light_p, np.array([5]))
    assert np.all(mats["emission"][0] > 0.0)
    assert not mats["in_mask"][0]
    mats = box_scene.materials_at(p, np.array([6, 6]))
    assert mats["in_mask"].all()


def test_object_bounding_sphere_contains_spheres(box_scene):
    c, r = box_scene.object_bounding_sphere()
    for o in box_scene.objects:
        if not o.in_mask:
            continue
        assert np.linalg.norm(o.shape.center - c) + o.shape.radius <= r + 1e-9


def test_json_round_trip(box_scene, tmp_path):
    path = tmp_path / "scene.json"
    sc.save_scene(box_scene, path)
    back = sc.load_scene(path)
    rng = np.random.default_rng(1)
    p = rng.uniform(-1.0, 1.0, size=(100, 3))
    d0, i0 = box_scene.sdf(p)
    d1, i1 = back.sdf(p)
    np.testing.assert_allclose(d0, d1, atol=1e-12)
    np.testing.assert_array_equal(i0, i1)
    assert back.objects[6].in_mask


def test_malformed_scene_rejected():
    with pytest.raises(sc.SceneError):
        sc.SceneModel.from_json({"objects": [{"shape": {"type": "torus"}}]})
    with pytest.raises(sc.SceneError):
        sc.SceneModel.from_json({"objects": [{"albedo": [1, 1, 1]}]})


# -- sphere tracing -----------------------------------------------------------------

def test_ray_surface_hit_sphere_analytic(box_scene):
    sph = box_scene.objects[6].shape
    origin = np.array([0.0, -0.3, 0.9])
    to_center = sph.center - origin
    d = to_center / np.linalg.norm(to_center)
    t, hit, p, ids = sc.ray_surface_hit(box_scene, origin[None, :], d[None, :])
    assert hit[0] and ids[0] == 6
    t_true = np.linalg.norm(to_center) - sph.radius
    assert t[0] == pytest.approx(t_true, abs=5e-4)
    assert abs(sph.distance(p[:1])[0]) < 5e-4


def test_ray_surface_hit_walls_and_counts(box_scene):
    rng = np.random.default_rng(2)
    o = np.tile(np.array([0.0, -0.2, 0.8]), (64, 1))
    d = rng.standard_normal((64, 3))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    t, hit, p, ids = sc.ray_surface_hit(box_scene, o, d)
    assert hit.all()   # closed box: everything hits something
    dists, _ = box_scene.sdf(p[hit])
    assert np.max(np.abs(dists)) < 5e-4


def test_ray_miss_outside_scene():
    s = sc.SceneModel("one", (sc.SceneObject("s", sc.Sphere(np.zeros(3), 0.5)),))
    o = np.array([[3.0, 0.0, 0.0]])
    d = np.array([[1.0, 0.0, 0.0]])   # pointing away
    t, hit, _, _ = sc.ray_surface_hit(s, o, d)
    assert not hit[0]


# -- volume helpers --------------------------------------------------------------------

def test_volsdf_density_anchor_values():
    alpha, beta = 2.0, 0.1
    d = np.array([0.0, -beta, beta, 10.0, -10.0])
    sig = sc.volsdf_density(d, alpha, beta)
    assert sig[0] == pytest.approx(alpha / 2.0, rel=1e-12)
    assert sig[1] == pytest.approx(alpha * (1.0 - 0.5 * np.exp(-1.0)), rel=1e-12)
    assert sig[2] == pytest.approx(alpha * 0.5 * np.exp(-1.0), rel=1e-12)
    assert sig[3] == pytest.approx(0.0, abs=1e-12)
    assert sig[4] == pytest.approx(alpha, rel=1e-12)
    assert np.all(np.diff(sig[np.argsort(d)]) <= 1e-12)   # nonincreasing in d


def test_blend_weights_partition_of_unity():
    rng = np.random.default_rng(3)
    sigma = rng.uniform(0.0, 5.0, size=(8, 32))
    delta = rng.uniform(0.01, 0.2, size=(8, 32))
    w, bg = sc.blend_weights(sigma, delta)
    np.testing.assert_allclose(w.sum(axis=-1) + bg, 1.0, atol=1e-12)
    assert np.all(w >= 0.0)


def test_blend_weights_opaque_front_sample():
    sigma = np.array([1000.0, 1000.0, 1000.0])
    delta = np.full(3, 0.1)
    w, bg = sc.blend_weights(sigma, delta)
    assert w[0] == pytest.approx(1.0, abs=1e-12)
    assert bg == pytest.approx(0.0, abs=1e-12)


def test_blend_weights_differentiable():
    tape = ad.Tape()
    sigma = tape.var(np.array([0.5, 1.0, 2.0]))
    delta = np.full(3, 0.1)
    w, bg = sc.blend_weights(sigma, delta)
    loss = ad.sum_(w * np.array([1.0, 2.0, 3.0]))
    tape.backward(loss)
    assert sigma.grad is not None and np.all(np.isfinite(sigma.grad))
    # finite-difference cross-check on the first sample
    h = 1e-6
    def f(s0):
        ww, _ = sc.blend_weights(np.array([s0, 1.0, 2.0]), delta)
        return float(np.sum(ww * np.array([1.0, 2.0, 3.0])))
    num = (f(0.5 + h) - f(0.5 - h)) / (2.0 * h)
    assert sigma.grad[0] == pytest.approx(num, rel=1e-5)


def test_laplace_cdf_matches_scipy_form():
    x = np.linspace(-3.0, 3.0, 101)
    beta = 0.25
    want = np.where(x <= 0, 0.5 * np.exp(x / beta), 1.0 - 0.5 * np.exp(-x / beta))
    np.testing.assert_allclose(sc.laplace_cdf(x, beta), want, atol=1e-15)


def test_camera_region_is_free_space(box_scene):
    # the orbit rig lives in the front half of the box; no geometry there
    probes = np.array([[0.0, -0.2, 0.9], [0.3, 0.0, 0.7], [-0.3, -0.4, 0.8]])
    d, _ = box_scene.sdf(probes)
    assert np.all(d > 0.05)
