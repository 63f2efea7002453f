import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from conftest import random_params
from twohands.handmodel import (GLOBAL_DOF, N_JOINTS, PARENTS, HandParams, ModelConfig, bone_lengths,
                                build_template, keypoints, load_template, pose_hands, pose_jacobian,
                                rodrigues, save_template, signed_volume, vertex_normals)

MIRROR = np.diag([-1.0, 1.0, 1.0])


def naive_lbs(t, beta, theta):
    """Reference left-hand skinning with 4x4 transforms and scipy rotations, one joint at a time."""
    J = t.joints + (t.joint_shape_basis @ beta).reshape(N_JOINTS, 3)
    Y = t.vertices + (t.shape_basis @ beta).reshape(-1, 3)
    local_axes = (t.pose_basis @ theta[GLOBAL_DOF:]).reshape(N_JOINTS - 1, 3)
    G = [None] * N_JOINTS
    G[0] = np.eye(4)
    G[0][:3, :3] = Rotation.from_rotvec(theta[3:6]).as_matrix()
    G[0][:3, 3] = theta[:3]
    for k in range(1, N_JOINTS):
        T = np.eye(4)
        R = Rotation.from_rotvec(local_axes[k - 1]).as_matrix()
        T[:3, :3] = R
        T[:3, 3] = J[k] - R @ J[k]
        G[k] = G[PARENTS[k]] @ T
    out = np.zeros_like(Y)
    for i in range(len(Y)):
        A = sum(t.skin_weights[i, k] * G[k] for k in range(N_JOINTS))
        out[i] = A[:3, :3] @ Y[i] + A[:3, 3]
    return out


def test_template_invariants(template):
    template.check_invariants()
    assert template.n_vertices <= 800
    assert template.n_shape == 10 and template.n_articulation == 45


def test_faces_wind_outward(template):
    assert signed_volume(template.vertices, template.faces) > 0
    # right-hand faces are re-wound so the mirrored mesh also encloses positive volume
    p = HandParams.for_template(template)
    V = pose_hands(template, p).vertex_positions[template.n_vertices:]
    assert signed_volume(V, template.hand_faces("right")) > 0


def test_rest_pose_reproduces_template(template):
    V = pose_hands(template, HandParams.for_template(template)).vertex_positions
    np.testing.assert_allclose(V[:template.n_vertices], template.vertices, atol=1e-14)
    np.testing.assert_allclose(V[template.n_vertices:], template.vertices @ MIRROR, atol=1e-14)


@pytest.mark.parametrize("seed", range(3))
def test_skinning_matches_naive_reference(template, seed):
    p = random_params(template, np.random.default_rng(seed))
    V = pose_hands(template, p).vertex_positions[:template.n_vertices]
    ref = naive_lbs(template, p.beta_left, p.theta_left)
    np.testing.assert_allclose(V, ref, atol=1e-12)


def test_right_hand_is_mirror_image(template, rng):
    p = random_params(template, rng)
    q = p.copy()
    # reflecting a posed left hand: translation reflects, axis-angle maps to -M r
    q.beta_right[:] = p.beta_left
    q.theta_right[:3] = MIRROR @ p.theta_left[:3]
    q.theta_right[3:6] = -MIRROR @ p.theta_left[3:6]
    q.theta_right[GLOBAL_DOF:] = p.theta_left[GLOBAL_DOF:]
    V = pose_hands(template, q).vertex_positions
    n = template.n_vertices
    np.testing.assert_allclose(V[n:], V[:n] @ MIRROR, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-0.3, 0.3), min_size=3, max_size=3))
def test_translation_moves_every_vertex(template, shift):
    p = HandParams.for_template(template)
    p.theta_left[GLOBAL_DOF:] = 0.2
    V0 = pose_hands(template, p).vertex_positions
    q = p.copy()
    q.theta_left[:3] += shift
    q.theta_right[:3] += shift
    np.testing.assert_allclose(pose_hands(template, q).vertex_positions, V0 + shift, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-2.0, 2.0), min_size=3, max_size=3))
def test_global_rotation_is_rigid(template, rotvec):
    p = HandParams.for_template(template)
    p.theta_left[GLOBAL_DOF:] = 0.3
    p.theta_left[:3] = (0.02, -0.01, 0.5)
    V0 = pose_hands(template, p).vertex_positions[:template.n_vertices]
    q = p.copy()
    q.theta_left[3:6] = rotvec
    V1 = pose_hands(template, q).vertex_positions[:template.n_vertices]
    R = Rotation.from_rotvec(rotvec).as_matrix()
    np.testing.assert_allclose(V1, (V0 - p.theta_left[:3]) @ R.T + p.theta_left[:3], atol=1e-12)


@pytest.mark.parametrize("r", [[0.3, -1.2, 0.7], [1e-9, 0, 0], [0, 0, 0], [3e-3, 2e-3, -1e-3], [0, 3.1, 0]])
def test_rodrigues_matches_scipy(r):
    np.testing.assert_allclose(rodrigues(np.array(r, float)), Rotation.from_rotvec(r).as_matrix(), atol=1e-14)


@pytest.mark.parametrize("r", [[0.3, -1.2, 0.7], [2e-3, -1e-3, 4e-3], [0.0, 0.0, 0.0]])
def test_rodrigues_derivative(r):
    r = np.array(r, float)
    _, dR = rodrigues(r, jacobian=True)
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd = (Rotation.from_rotvec(r + e).as_matrix() - Rotation.from_rotvec(r - e).as_matrix()) / (2 * h)
        np.testing.assert_allclose(dR[i], fd, atol=1e-8)


def test_rodrigues_batch(rng):
    r = rng.normal(size=(4, 5, 3))
    R = rodrigues(r)
    assert R.shape == (4, 5, 3, 3)
    np.testing.assert_allclose(R[2, 3], Rotation.from_rotvec(r[2, 3]).as_matrix(), atol=1e-14)


@pytest.mark.parametrize("seed", range(2))
def test_pose_jacobian_matches_finite_differences(template, seed):
    rng = np.random.default_rng(seed)
    p = random_params(template, rng)
    jac = pose_jacobian(template, p)
    x = p.to_vector()
    h = 1e-6

    def evaluate(v):
        ph = pose_hands(template, HandParams.from_vector(v, template.n_shape))
        return np.concatenate([ph.vertex_positions.ravel(), ph.proxy_means.ravel(), ph.proxy_sigmas])

    A = jac.dense()
    for c in rng.choice(len(x), 12, replace=False):
        xp, xm = x.copy(), x.copy()
        xp[c] += h
        xm[c] -= h
        fd = (evaluate(xp) - evaluate(xm)) / (2 * h)
        assert np.linalg.norm(A[:, c] - fd) <= 1e-6 * max(np.linalg.norm(fd), 1e-3)


def test_jacobian_vertex_subset(template, rng):
    p = random_params(template, rng)
    full = pose_jacobian(template, p)
    ids = np.array([3, 17, template.n_vertices + 5, 2 * template.n_vertices - 1])
    sub = pose_jacobian(template, p, vertex_ids=ids[::-1])
    np.testing.assert_array_equal(sub.vertex_ids, ids)
    np.testing.assert_allclose(sub.vertices, full.vertices[ids], atol=0)


def test_hands_do_not_share_parameters(template, rng):
    jac = pose_jacobian(template, random_params(template, rng))
    p = HandParams.for_template(template)
    n = template.n_vertices
    right_cols = p.columns("right")
    assert not np.any(jac.vertices[:n][:, :, right_cols])
    assert not np.any(jac.vertices[n:][:, :, p.columns("left")])


def test_bone_lengths_at_mean_shape(template):
    cfg = ModelConfig()
    L = bone_lengths(template, np.zeros(template.n_shape))
    for f in range(5):
        np.testing.assert_allclose(L[3 * f + 1:3 * f + 3], cfg.finger_lengths[f][:2], rtol=1e-9)
    with pytest.raises(ValueError):
        bone_lengths(template, np.zeros(3))


def test_keypoints_are_wrist_and_tips(template, rng):
    p = random_params(template, rng)
    posed = pose_hands(template, p)
    k = keypoints(template, posed)
    assert k.shape == (2, 6, 3)
    np.testing.assert_array_equal(k[1, 0], posed.joint_positions[1, 0])
    np.testing.assert_array_equal(k[0, 1:], posed.vertex_positions[template.tip_vertices])


def test_vertex_normals_of_a_tetrahedron():
    V = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    F = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    assert signed_volume(V, F) == pytest.approx(1 / 6)
    n = vertex_normals(V, F)
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0)
    assert n[0] @ np.array([-1, -1, -1]) > 0  # corner normal points away from the solid


def test_proxies_follow_their_joint(template, rng):
    p = random_params(template, rng)
    posed = pose_hands(template, p)
    c = template.n_proxies
    assert posed.proxy_means.shape == (2 * c, 3)
    assert np.all(posed.proxy_sigmas > 0)
    # sigmas depend on shape only
    q = p.copy()
    q.theta_left[GLOBAL_DOF:] += 0.3
    np.testing.assert_allclose(pose_hands(template, q).proxy_sigmas, posed.proxy_sigmas)


def test_save_load_roundtrip(template, tmp_path):
    path = tmp_path / "hand.twht"
    save_template(template, path)
    t2 = load_template(path)
    for name in ("vertices", "faces", "joints", "parents", "skin_weights", "shape_basis",
                 "joint_shape_basis", "pose_basis", "tip_vertices"):
        np.testing.assert_array_equal(getattr(t2, name), getattr(template, name))
    p = random_params(template, np.random.default_rng(5))
    np.testing.assert_allclose(pose_hands(t2, p).vertex_positions, pose_hands(template, p).vertex_positions,
                               atol=1e-15)
    save_template(t2, tmp_path / "again.twht")
    assert (tmp_path / "again.twht").read_bytes() == path.read_bytes()


def test_load_rejects_corrupt_files(template, tmp_path):
    path = tmp_path / "hand.twht"
    save_template(template, path)
    data = path.read_bytes()
    (tmp_path / "magic.twht").write_bytes(b"XXXX" + data[4:])
    (tmp_path / "long.twht").write_bytes(data + b"\0" * 8)
    for name in ("magic.twht", "long.twht"):
        with pytest.raises(ValueError):
            load_template(tmp_path / name)


def test_build_is_deterministic(template):
    again = build_template()
    np.testing.assert_array_equal(again.vertices, template.vertices)
    np.testing.assert_array_equal(again.faces, template.faces)


def test_smaller_subspaces():
    t = build_template(ModelConfig(n_shape=4, n_articulation=15))
    t.check_invariants()
    assert t.n_params == 2 * (4 + 6 + 15)


@pytest.mark.parametrize("kw", [dict(n_shape=0), dict(n_articulation=46), dict(grid_spacing=-1.0),
                                dict(finger_radii=(0.01, 0.0, 0.01, 0.01, 0.01)), dict(sigma_scale=0.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        build_template(ModelConfig(**kw))


def test_parameter_checks(template):
    with pytest.raises(ValueError):
        pose_hands(template, HandParams.zeros(3, template.n_pose))
    p = HandParams.for_template(template)
    p.theta_left[0] = np.nan
    with pytest.raises(ValueError):
        pose_hands(template, p)
    with pytest.raises(ValueError):
        HandParams(np.zeros(2), np.zeros(3), np.zeros(10), np.zeros(10))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(7, 20), st.integers(0, 2 ** 32 - 1))
def test_params_vector_roundtrip(ns, npose, seed):
    x = np.random.default_rng(seed).normal(size=2 * (ns + npose))
    p = HandParams.from_vector(x, ns)
    np.testing.assert_array_equal(p.to_vector(), x)
    q = HandParams.from_dict(p.to_dict())
    np.testing.assert_array_equal(q.to_vector(), x)
