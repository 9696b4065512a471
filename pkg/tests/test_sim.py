import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtpose.declutter import MU_Q, PushPlan
from vtpose.geometry import (Pose, Ray, box_mesh, closest_points_on_triangles, quat_from_axis_angle,
                             random_rotation, ray_mesh_intersect)
from vtpose.nbv import SensorModel, make_viewpoint
from vtpose.sim import (NOISELESS, PUSH_CLAMPED, PUSH_CONTACT_LOST, PUSH_OK, NoiseModel, Scene, SceneError,
                        SceneObject, apply_grasp_removal, apply_push, bottle_mesh, cast_rays, compute_metrics,
                        grasp_quality_stub, load_scene, random_scene, render_depth, scene_to_toml,
                        simulate_touch)

SENSOR = SensorModel(ray_cols=40, ray_rows=30)


def box_obj(oid, size, xyz, target=False, q=0.5, yaw=0.0):
    return SceneObject(oid, box_mesh(size), Pose(quat_from_axis_angle([0, 0, 1], yaw), xyz), target, q,
                       shape={"box": list(size)})


def lone_cube():
    return Scene([box_obj(1, [0.1, 0.1, 0.1], [0, 0, 0.05], True)], noise=NOISELESS)


def surface_distance(points, mesh):
    _, _, d = closest_points_on_triangles(points, mesh.triangles)
    return d


# -- scene validation -------------------------------------------------------------------

def test_scene_invariants():
    with pytest.raises(SceneError):
        Scene([box_obj(1, [0.1] * 3, [0, 0, 0.05])])
    with pytest.raises(SceneError):
        Scene([box_obj(1, [0.1] * 3, [0, 0, 0.05], True), box_obj(1, [0.1] * 3, [1, 0, 0.05])])
    with pytest.raises(SceneError):
        Scene([box_obj(1, [0.1] * 3, [0, 0, 0.0], True)])
    with pytest.raises(ValueError):
        NoiseModel(depth_sigma=-1)


def test_scene_file_round_trip(tmp_path):
    scene = random_scene(3)
    path = tmp_path / "s.toml"
    path.write_text(scene_to_toml(scene))
    back = load_scene(path)
    assert [o.id for o in back.objects] == [o.id for o in scene.objects]
    for a, b in zip(scene.objects, back.objects):
        assert np.allclose(a.pose.matrix(), b.pose.matrix())
        assert np.allclose(a.mesh.vertices, b.mesh.vertices)
        assert a.is_target == b.is_target and a.grasp_quality == b.grasp_quality
    assert back.noise == scene.noise and back.static_view == pytest.approx(scene.static_view)


def test_bad_scene_files(tmp_path):
    with pytest.raises(SceneError):
        load_scene(tmp_path / "missing.toml")
    p = tmp_path / "bad.toml"
    p.write_text('[[objects]]\nid = 1\nbox = [0.1, 0.1, 0.1]\ncylinder = [0.1, 0.1]\ntranslation = [0, 0, 0.05]\n')
    with pytest.raises(SceneError):
        load_scene(p)
    p.write_text('[[objects]]\nid = 1\nbox = [0.1, 0.1, 0.1]\ntranslation = [0, 0, 0.05]\n'
                 'is_target = true\ngrasp_quality = 2.0\n')
    with pytest.raises(SceneError):
        load_scene(p)


def test_bottle_dimensions():
    lo, hi = bottle_mesh().bounds()
    assert hi[2] - lo[2] == pytest.approx(0.24)
    assert hi[0] - lo[0] == pytest.approx(0.08, abs=1e-3)


# -- rendering ------------------------------------------------------------------------

def test_table_only_view():
    scene = Scene([box_obj(1, [0.1] * 3, [3, 3, 0.05], True)], noise=NOISELESS)
    r = render_depth(scene, make_viewpoint([0, 0, 0.6], [0, 0, 0]), SENSOR)
    assert len(r.cloud) == 40 * 30
    assert np.all(r.ids == 0) and np.allclose(r.cloud[:, 2], 0, atol=1e-9)


def test_noiseless_cube_points_on_surfaces():
    scene = lone_cube()
    r = render_depth(scene, make_viewpoint([0.3, -0.2, 0.3], [0, 0, 0.05]), SENSOR)
    cube = r.object_points(1)
    assert len(cube) > 50
    assert surface_distance(cube, scene.target.world_mesh()).max() <= 1e-7
    assert np.allclose(r.object_points(0)[:, 2], 0.0, atol=1e-7)


def test_occluder_hides_target():
    target = box_obj(1, [0.1, 0.1, 0.1], [0, 0, 0.05], True)
    wall = box_obj(2, [0.02, 0.3, 0.3], [0.2, 0, 0.15])
    view = make_viewpoint([0.5, 0, 0.1], [0, 0, 0.05])
    scene = Scene([target, wall], noise=NOISELESS)
    r = render_depth(scene, view, SENSOR)
    dirs = view.world_rays(SENSOR)
    _, hits_wall = cast_rays([wall], view.position, dirs)
    _, hits_target = cast_rays([target], view.position, dirs)
    blocked = (hits_wall == 2).reshape(30, 40)
    assert np.sum((hits_target == 1) & (hits_wall == 2)) > 0
    assert not np.any(r.id_image[blocked] == 1)
    assert np.array_equal(r.id_image == 1, ((hits_target == 1) & (hits_wall != 2)).reshape(30, 40))


def test_render_noise_and_determinism():
    scene = random_scene(2)
    view = scene.static_viewpoint()
    a = render_depth(scene, view, SENSOR, seed=5)
    b = render_depth(scene, view, SENSOR, seed=5)
    c = render_depth(scene, view, SENSOR, seed=6)
    assert np.array_equal(a.cloud, b.cloud) and np.array_equal(a.id_image, b.id_image)
    assert not np.array_equal(a.cloud, c.cloud)


def test_degraded_depth_drops_most_target_returns():
    scene = random_scene(4)
    view = make_viewpoint([0, 0, 0.7], scene.look_at)
    full = render_depth(scene, view, SENSOR, NOISELESS)
    scene.degraded_depth = True
    deg = render_depth(scene, view, SENSOR, NOISELESS)
    n_full, n_deg = np.sum(full.ids == 1), np.sum(deg.ids == 1)
    assert n_full > 20
    assert 0.05 * n_full < n_deg < 0.4 * n_full
    assert np.array_equal(full.id_image, deg.id_image)


# -- touch -----------------------------------------------------------------------------

def test_touch_examples():
    scene = lone_cube()
    p, oid = simulate_touch(scene, Ray([0.2, 0.01, 0.05], [-1, 0, 0]))
    assert oid == 1 and np.allclose(p, [0.05, 0.01, 0.05])
    assert simulate_touch(scene, Ray([0.2, 0.5, 0.05], [-1, 0, 0])) is None
    scene.objects.append(box_obj(2, [0.02, 0.1, 0.1], [0.1, 0, 0.05]))
    p, oid = simulate_touch(scene, Ray([0.2, 0.01, 0.05], [-1, 0, 0]))
    assert oid == 2 and p[0] == pytest.approx(0.11)


def test_noiseless_touch_lies_on_mesh():
    scene = Scene([SceneObject(1, bottle_mesh(), Pose(random_rotation(np.random.default_rng(1)), [0, 0, 0.3]),
                               True)], noise=NOISELESS)
    rng = np.random.default_rng(0)
    placed = scene.target.world_mesh()
    for _ in range(20):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        ray = Ray(np.array([0, 0, 0.3]) - 0.5 * d + rng.normal(0, 0.01, 3), d)
        got = simulate_touch(scene, ray)
        want = ray_mesh_intersect(ray, placed)
        assert (got is None) == (want is None)
        if got is not None:
            assert np.linalg.norm(got[0] - want[0]) <= 1e-7


def test_touch_noise_is_seeded():
    scene = lone_cube()
    scene.noise = NoiseModel(touch_sigma=0.001)
    ray = Ray([0.2, 0.01, 0.05], [-1, 0, 0])
    a, b = simulate_touch(scene, ray, seed=1)[0], simulate_touch(scene, ray, seed=1)[0]
    assert np.array_equal(a, b)
    assert 0 < np.linalg.norm(a - [0.05, 0.01, 0.05]) < 0.01


# -- manipulation -----------------------------------------------------------------------

def push(d, dist=0.05):
    return PushPlan(np.zeros(2), np.asarray(d, float), dist, None, np.asarray(d, float))


def test_push_examples():
    scene = Scene([box_obj(1, [0.1] * 3, [0, 0, 0.05], True), box_obj(2, [0.05] * 3, [0.2, 0, 0.025], yaw=0.3)])
    other = scene.get(1).pose
    before = scene.get(2).pose
    assert apply_push(scene, 2, push([-1, 0])) == PUSH_OK
    after = scene.get(2).pose
    assert after.translation[0] == pytest.approx(before.translation[0] - 0.05)
    assert after.translation[2] == before.translation[2]
    assert np.array_equal(after.rotation, before.rotation)
    assert scene.get(1).pose is other
    assert apply_push(scene, 2, push([1, 0], 0.0)) == PUSH_OK
    assert np.array_equal(scene.get(2).pose.translation, after.translation)


def test_push_clamped_and_contact_loss():
    scene = Scene([box_obj(1, [0.1] * 3, [0, 0, 0.05], True), box_obj(2, [0.05] * 3, [0.58, 0, 0.025])])
    assert apply_push(scene, 2, push([1, 0])) == PUSH_CLAMPED
    assert scene.get(2).pose.translation[0] == pytest.approx(0.6)
    scene.push_failure = lambda oid, count: count == 1
    assert apply_push(scene, 2, push([-1, 0], 0.1)) == PUSH_CONTACT_LOST
    assert scene.get(2).pose.translation[0] == pytest.approx(0.55)


def test_grasp_removal():
    scene = random_scene(0)
    apply_grasp_removal(scene, 3)
    assert len(scene.objects) == 4
    r = render_depth(scene, scene.static_viewpoint(), SENSOR)
    assert 3 not in set(r.ids.tolist())
    with pytest.raises(SceneError):
        apply_grasp_removal(scene, 3)
    with pytest.raises(SceneError):
        apply_grasp_removal(scene, 1)


def test_grasp_quality_stub():
    top = make_viewpoint([0, 0, 0.8], [0, 0, 0])
    lone = Scene([box_obj(1, [0.1, 0.1, 0.1], [0, 0, 0.05], True, q=0.9)], noise=NOISELESS)
    q, gp = grasp_quality_stub(lone, 1, top, SENSOR)
    assert q == pytest.approx(0.9)
    assert gp.point[2] == pytest.approx(0.1, abs=1e-9)
    # a thin plate hovering over half of the top face
    plate = box_obj(2, [0.05, 0.2, 0.01], [-0.025, 0, 0.3])
    half = Scene([box_obj(1, [0.1, 0.1, 0.1], [0, 0, 0.05], True, q=0.9), plate], noise=NOISELESS)
    q, gp = grasp_quality_stub(half, 1, top, SENSOR)
    dirs = top.world_rays(SENSOR)
    _, solo = cast_rays([half.get(1)], top.position, dirs)
    _, both = cast_rays(half.objects, top.position, dirs)
    assert q == pytest.approx(0.9 * np.sum(both == 1) / np.sum(solo == 1))
    assert q == pytest.approx(0.45, abs=0.05)
    assert gp.pixel[0] >= 20
    hidden = Scene([box_obj(1, [0.1] * 3, [0, 0, 0.05], True), box_obj(2, [0.3, 0.3, 0.01], [0, 0, 0.3])],
                   noise=NOISELESS)
    assert grasp_quality_stub(hidden, 1, top, SENSOR) == (0.0, None)
    low = Scene([box_obj(1, [0.1] * 3, [0, 0, 0.05], True, q=0.05)], noise=NOISELESS)
    assert grasp_quality_stub(low, 1, top, SENSOR)[0] < MU_Q


# -- metrics ---------------------------------------------------------------------------

def test_metric_examples():
    model = np.array([[0, 0, 0], [1, 0, 0.0]])
    assert compute_metrics(Pose(), Pose(), model).to_dict() == {"err_T": 0.0, "err_R": 0.0, "err_adi": 0.0}
    m = compute_metrics(Pose(translation=[0.5, 0, 0]), Pose(), model)
    assert (m.err_T, m.err_R, m.err_adi) == (0.5, 0.0, 0.5)


def test_adi_ignores_symmetry():
    model = np.array([[-1, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0.0]])
    m = compute_metrics(Pose(quat_from_axis_angle([0, 0, 1], np.pi)), Pose(), model)
    assert m.err_R == pytest.approx(180.0)
    assert m.err_adi <= 1e-6


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_adi_bounded_by_translation_at_equal_rotation(seed):
    rng = np.random.default_rng(seed)
    model = rng.normal(size=(50, 3))
    q = random_rotation(rng)
    gt = Pose(q, rng.normal(size=3))
    est = Pose(q, gt.translation + rng.normal(size=3) * 0.1)
    m = compute_metrics(est, gt, model)
    assert m.err_adi <= m.err_T + 1e-12
    assert m.err_R <= 1e-6


def test_metrics_reject_empty_model():
    with pytest.raises(ValueError):
        compute_metrics(Pose(), Pose(), np.zeros((0, 3)))


def test_random_scene_layout():
    for seed in range(5):
        scene = random_scene(seed)
        assert len(scene.objects) == 5 and scene.target.id == 1
        assert np.array_equal(random_scene(seed).get(3).pose.translation, scene.get(3).pose.translation)
    assert random_scene(0, degraded=True).degraded_depth
