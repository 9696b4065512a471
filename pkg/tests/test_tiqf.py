import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtpose.geometry import (GeometryError, Pose, box_mesh, quat_angle, quat_distance, quat_from_axis_angle,
                             quat_mul, quat_to_rotmat, random_rotation, Ray, ray_mesh_intersect, rotmat_to_quat,
                             sample_mesh_surface, skew)
from vtpose.tiqf import (CorrespondencePair, FilterState, InsufficientDataError, TiqfParams, _sequential_update,
                         build_pseudo_measurement, estimate_translation, find_correspondences, kalman_update,
                         measurement_noise, register, relative_vectors, sequential_update)

S = np.sqrt(0.5)


def horn_oracle(scene, model):
    """Least-squares rigid fit on known correspondences (SVD form of Horn's method)."""
    cs, cm = scene.mean(axis=0), model.mean(axis=0)
    U, _, Vt = np.linalg.svd((model - cm).T @ (scene - cs))
    D = np.diag([1, 1, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, cs - R @ cm


def textbook_kalman(x, P, H, Rn):
    """Standard linear Kalman correction for z = 0, written independently."""
    S_ = H @ P @ H.T + Rn
    K = P @ H.T @ np.linalg.inv(S_)
    x1 = x + K @ (np.zeros(4) - H @ x)
    P1 = (np.eye(4) - K @ H) @ P
    n = np.linalg.norm(x1)
    return x1 / n, P1 / n ** 2


# -- pseudo-measurement -----------------------------------------------------------

def test_identity_pair_structure():
    o = np.array([0.3, -0.1, 0.2])
    pair = CorrespondencePair(np.zeros(3), o, np.zeros(3), o)
    H = build_pseudo_measurement(pair)
    want = np.zeros((4, 4))
    want[1:, 1:] = skew(2 * o)
    assert np.allclose(H, want)
    assert np.allclose(H @ [1, 0, 0, 0], 0)


def test_quarter_turn_pair_in_nullspace():
    pair = CorrespondencePair(s_i=np.array([0, 1, 0.]), s_j=np.array([-1, 0, 0.]),
                              o_i=np.array([1, 0, 0.]), o_j=np.array([0, 1, 0.]))
    H = build_pseudo_measurement(pair)
    assert np.linalg.norm(H @ [S, 0, 0, S]) <= 1e-9


def test_symmetric_part_has_zero_lower_block():
    rng = np.random.default_rng(0)
    pair = CorrespondencePair(*rng.normal(size=(4, 3)))
    H = build_pseudo_measurement(pair)
    assert np.allclose((H + H.T)[1:, 1:], 0)


def test_degenerate_pair_rejected():
    with pytest.raises(GeometryError):
        build_pseudo_measurement(CorrespondencePair(np.ones(3), np.ones(3), np.zeros(3), np.ones(3)))


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1))
def test_true_rotation_in_nullspace(seed):
    rng = np.random.default_rng(seed)
    q = random_rotation(rng)
    R = quat_to_rotmat(q)
    t = rng.normal(size=3)
    o_i, o_j = rng.normal(size=(2, 3))
    pair = CorrespondencePair(R @ o_i + t, R @ o_j + t, o_i, o_j)
    assert np.linalg.norm(build_pseudo_measurement(pair) @ q) <= 1e-9


# -- measurement noise --------------------------------------------------------------

def test_noise_at_identity_without_covariance():
    st0 = FilterState([1, 0, 0, 0], np.zeros((4, 4)))
    assert np.allclose(measurement_noise(st0, 0.05), 0.0125 * np.diag([0, 1, 1, 1]))


def test_noise_with_isotropic_covariance():
    x = quat_from_axis_angle([1, 1, 0], 0.4)
    s2 = 0.3
    got = measurement_noise(FilterState(x, s2 * np.eye(4)), 0.05)
    want = 0.0125 * ((1 + 4 * s2) * np.eye(4) - np.outer(x, x) - s2 * np.eye(4))
    assert np.allclose(got, want)


@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1.0))
def test_noise_trace_identity_and_psd(seed, rho):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(4, 4))
    state = FilterState(random_rotation(rng), A @ A.T)
    N = measurement_noise(state, rho)
    M = np.outer(state.mean, state.mean) + state.covariance
    assert np.trace(N) == pytest.approx(rho / 4 * 3 * np.trace(M))
    assert np.allclose(N, N.T)
    assert np.linalg.eigvalsh(N).min() >= -1e-12


# -- Kalman update ------------------------------------------------------------------

def test_zero_measurement_leaves_state():
    state = FilterState.initial(quat_from_axis_angle([0, 0, 1], 0.3), 0.2)
    new = kalman_update(state, np.zeros((4, 4)), measurement_noise(state, 0.05))
    assert np.allclose(new.mean, state.mean) and np.allclose(new.covariance, state.covariance)


def test_consistent_measurement_keeps_mean_and_shrinks_covariance():
    rng = np.random.default_rng(5)
    q = random_rotation(rng)
    R = quat_to_rotmat(q)
    o_i, o_j = rng.normal(size=(2, 3))
    H = build_pseudo_measurement(CorrespondencePair(R @ o_i, R @ o_j, o_i, o_j))
    state = FilterState(q, 0.1 * np.eye(4))
    new = kalman_update(state, H, measurement_noise(state, 0.05))
    assert quat_distance(new.mean, q) < 1e-12
    assert np.trace(new.covariance) <= np.trace(state.covariance) + 1e-15


def test_random_update_matches_textbook_kalman():
    rng = np.random.default_rng(9)
    for _ in range(20):
        x = random_rotation(rng)
        A = rng.normal(size=(4, 4))
        P = A @ A.T * 0.1
        H = rng.normal(size=(4, 4))
        B = rng.normal(size=(4, 4))
        Rn = B @ B.T + 0.1 * np.eye(4)
        new = kalman_update(FilterState(x, P), H, Rn)
        xm, Pm = textbook_kalman(x, P, H, Rn)
        assert np.allclose(new.mean, xm, atol=1e-10)
        assert np.allclose(new.covariance, 0.5 * (Pm + Pm.T), atol=1e-10)


def test_singular_innovation_skips_update():
    state = FilterState([1, 0, 0, 0], np.zeros((4, 4)))
    assert kalman_update(state, np.zeros((4, 4)), np.zeros((4, 4))) is state


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_state_stays_unit_and_psd(seed):
    rng = np.random.default_rng(seed)
    state = FilterState.initial(random_rotation(rng), 0.5)
    for _ in range(30):
        pair = CorrespondencePair(*rng.normal(size=(4, 3)))
        state = kalman_update(state, build_pseudo_measurement(pair), measurement_noise(state, 0.05))
        assert abs(np.linalg.norm(state.mean) - 1) <= 1e-9
        assert np.allclose(state.covariance, state.covariance.T, atol=1e-9)
        assert np.linalg.eigvalsh(state.covariance).min() >= -1e-10


def test_compiled_sequence_matches_reference_path():
    rng = np.random.default_rng(2)
    pairs = [CorrespondencePair(*rng.normal(size=(4, 3))) for _ in range(40)]
    state = FilterState.initial(random_rotation(rng), 0.5)
    ref, _ = _sequential_update(state, pairs, 0.05)
    fast, skipped = sequential_update(state, [p.s_ji for p in pairs], [p.o_ji for p in pairs], 0.05)
    assert skipped == 0
    assert np.allclose(fast.mean, ref.mean, atol=1e-10)
    assert np.allclose(fast.covariance, ref.covariance, atol=1e-10)


# -- translation ----------------------------------------------------------------------

def test_translation_examples():
    rng = np.random.default_rng(0)
    o = rng.normal(size=(10, 3))
    assert np.allclose(estimate_translation([1, 0, 0, 0], o + [1, 2, 3], o), [1, 2, 3])
    assert np.allclose(estimate_translation([1, 0, 0, 0], [[0, 1, 0]], [[1, 0, 0]]), [-1, 1, 0])
    q = random_rotation(rng)
    t = rng.normal(size=3)
    assert np.allclose(estimate_translation(q, o @ quat_to_rotmat(q).T + t, o), t, atol=1e-9)


def test_translation_count_mismatch():
    with pytest.raises(GeometryError):
        estimate_translation([1, 0, 0, 0], np.zeros((3, 3)), np.zeros((2, 3)))


# -- correspondences -------------------------------------------------------------------

def test_matches_of_transformed_samples_are_exact():
    model = sample_mesh_surface(box_mesh([0.1, 0.2, 0.3]), 50, 0)
    pose = Pose(quat_from_axis_angle([1, 2, 3], 0.5), [0.1, 0.2, 0.3])
    pairs = find_correspondences(pose.apply(model), model, pose, seed=1)
    for p in pairs:
        assert np.allclose(pose.apply(p.o_i), p.s_i, atol=1e-12)
        assert np.allclose(pose.apply(p.o_j), p.s_j, atol=1e-12)


def test_three_points_give_two_pairs_deterministically():
    model = np.random.default_rng(3).normal(size=(20, 3))
    scene = model[:3] + 0.01
    a = find_correspondences(scene, model, Pose(), seed=4)
    b = find_correspondences(scene, model, Pose(), seed=4)
    assert len(a) == 2
    assert all(np.array_equal(x.s_i, y.s_i) and np.array_equal(x.o_j, y.o_j) for x, y in zip(a, b))


def test_all_pairs_mode_and_subsampling():
    model = np.random.default_rng(3).normal(size=(100, 3))
    assert len(find_correspondences(model[:5], model, Pose(), pairing="all")) == 10
    assert len(find_correspondences(model, model, Pose(), max_pairs=30)) == 30


def test_too_few_points():
    with pytest.raises(InsufficientDataError):
        find_correspondences(np.zeros((1, 3)), np.ones((5, 3)), Pose())
    with pytest.raises(InsufficientDataError):
        register(np.zeros((2, 3)), np.ones((5, 3)))


def test_relative_vectors_drop_degenerate_pairs():
    s = np.array([[0, 0, 0], [0, 0, 0], [1, 0, 0.]])
    rel_s, rel_o = relative_vectors(s, s.copy(), None, "all")
    assert len(rel_s) == 2


# -- registration -----------------------------------------------------------------------

def test_register_at_identity():
    mesh = box_mesh([0.1, 0.15, 0.2])
    scene = sample_mesh_surface(mesh, 200, 1)
    res = register(scene, mesh, Pose())
    assert np.linalg.norm(res.pose.translation) < 1e-4
    assert np.rad2deg(quat_angle(res.pose.rotation, [1, 0, 0, 0])) < 0.1


def test_register_quarter_turn_matches_horn():
    # elongated box: a quarter turn about z stays inside the matching basin
    model = sample_mesh_surface(box_mesh([0.05, 0.1, 0.2]), 200, 2)
    true = Pose(quat_from_axis_angle([0, 0, 1], np.pi / 2), [0.1, 0, 0])
    scene = true.apply(model)
    res = register(scene, model, Pose())
    R_h, t_h = horn_oracle(scene, model)
    assert res.converged and res.iterations <= 100
    assert np.linalg.norm(res.pose.translation - true.translation) < 1e-4
    assert np.rad2deg(quat_angle(res.pose.rotation, true.rotation)) < 0.1
    assert np.rad2deg(quat_angle(res.pose.rotation, rotmat_to_quat(R_h))) < 0.1
    assert np.linalg.norm(res.pose.translation - t_h) < 1e-4


def test_register_without_init_uses_centroids():
    mesh = box_mesh([0.1, 0.15, 0.2])
    scene = sample_mesh_surface(mesh, 200, 3) + [0.5, 0.0, 0.0]
    res = register(scene, mesh)
    assert np.linalg.norm(res.pose.translation - [0.5, 0, 0]) < 1e-3


def test_four_noisy_touches_within_a_centimeter():
    mesh = box_mesh([0.08, 0.08, 0.16])
    rng = np.random.default_rng(4)
    true = Pose(quat_from_axis_angle([0, 0, 1], 0.4), [0.0, 0.0, 0.08])
    placed = mesh.transformed(true)
    rays = [Ray([0.3, 0.01, 0.05], [-1, 0, 0]), Ray([-0.3, -0.01, 0.1], [1, 0, 0]),
            Ray([0.01, 0.3, 0.08], [0, -1, 0]), Ray([0.0, 0.0, 0.5], [0, 0, -1])]
    touches = np.array([ray_mesh_intersect(r, placed)[0] for r in rays]) + rng.normal(0, 0.001, (4, 3))
    init = Pose(quat_mul(quat_from_axis_angle([1, 0, 0], np.deg2rad(5)), true.rotation),
                true.translation + [0.01, -0.005, 0.005])
    res = register(touches, mesh, init, TiqfParams(pairing="all"),
                   init_state=FilterState.initial(init.rotation, 0.05))
    assert np.linalg.norm(res.pose.translation - true.translation) < 0.01


def test_register_reports_non_convergence():
    mesh = box_mesh([0.1, 0.15, 0.2])
    scene = Pose(quat_from_axis_angle([1, 1, 0], 0.8)).apply(sample_mesh_surface(mesh, 100, 1))
    res = register(scene, mesh, Pose(), TiqfParams(max_iterations=1))
    assert not res.converged and res.iterations == 1


def test_register_is_deterministic():
    mesh = box_mesh([0.1, 0.15, 0.2])
    scene = Pose(quat_from_axis_angle([1, 1, 0], 0.5), [0.02, 0, 0]).apply(sample_mesh_surface(mesh, 800, 1))
    a = register(scene, mesh, Pose(), seed=3)
    b = register(scene, mesh, Pose(), seed=3)
    assert np.array_equal(a.pose.rotation, b.pose.rotation) and a.iterations == b.iterations


def test_params_validation():
    with pytest.raises(ValueError):
        TiqfParams(rho=0)
    with pytest.raises(ValueError):
        TiqfParams(max_iterations=0)
