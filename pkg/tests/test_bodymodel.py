import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neural_descent import diffcore as dc
from neural_descent.bodymodel import (
    IDENTITY_6D, ModelState, Skeleton, a_pose, axis_angle_to_matrix, bone_scales, default_skeleton, make_shape_basis,
    matrix_to_rot6d, mesh_topology, pose_joints, pose_mesh, pose_vertices, prior_loss, prism_rest_corners,
    random_rotation, rot6d_to_matrix, sample_state,
)

RZ90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def test_rot6d_examples():
    np.testing.assert_array_equal(rot6d_to_matrix(np.array([1.0, 0, 0, 0, 1, 0])), np.eye(3))
    np.testing.assert_allclose(rot6d_to_matrix(np.array([0.0, 1, 0, -1, 0, 0])), RZ90, atol=1e-15)
    np.testing.assert_allclose(rot6d_to_matrix(np.array([2.0, 0, 0, 0, 3, 0])), np.eye(3), atol=1e-15)


@pytest.mark.parametrize("r", [[0, 0, 0, 0, 1, 0], [1, 0, 0, 2, 0, 0], [1, 1, 0, -3, -3, 0]])
def test_rot6d_degenerate_rejected(r):
    with pytest.raises(ValueError):
        rot6d_to_matrix(np.array(r, dtype=float))


vec = st.floats(-10, 10, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.lists(vec, min_size=6, max_size=6))
def test_rot6d_orthonormal(r):
    r = np.array(r)
    a1, a2 = r[:3], r[3:]
    n1 = np.linalg.norm(a1)
    if n1 < 1e-3 or np.linalg.norm(a2 - (a2 @ a1) / n1**2 * a1) < 1e-3:
        return
    R = rot6d_to_matrix(r)
    assert np.max(np.abs(R @ R.T - np.eye(3))) < 1e-9
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)


def test_rot6d_round_trip(rng):
    for _ in range(20):
        R = random_rotation(rng)
        np.testing.assert_allclose(rot6d_to_matrix(matrix_to_rot6d(R)), R, atol=1e-12)


def test_axis_angle_matches_closed_form(rng):
    for _ in range(20):
        w = rng.standard_normal(3)
        angle = np.linalg.norm(w)
        k = w / angle
        K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
        expected = np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K
        np.testing.assert_allclose(axis_angle_to_matrix(dc.Value(w)).data, expected, atol=1e-12)
    np.testing.assert_array_equal(axis_angle_to_matrix(dc.Value(np.zeros(3))).data, np.eye(3))


def test_rest_pose_joints(skeleton):
    s = a_pose(skeleton, t=(0, 0, 0))
    np.testing.assert_allclose(pose_joints(skeleton, s), skeleton.rest_joints(), atol=1e-15)
    s2 = a_pose(skeleton, t=(0, 0, 2))
    np.testing.assert_allclose(pose_joints(skeleton, s2), skeleton.rest_joints() + [0, 0, 2], atol=1e-15)


def test_root_rotation_permutes_coordinates(skeleton):
    s = a_pose(skeleton, t=(0, 0, 0))
    s.r = np.array([0.0, 1, 0, -1, 0, 0])
    J0 = skeleton.rest_joints()
    expected = np.column_stack([-J0[:, 1], J0[:, 0], J0[:, 2]])
    np.testing.assert_allclose(pose_joints(skeleton, s), expected, atol=1e-12)


def test_a_pose_bit_exact_across_calls(skeleton):
    a = pose_vertices(skeleton, dc.Value(a_pose(skeleton).to_vector()[None]))[0].data
    b = pose_vertices(skeleton, dc.Value(a_pose(default_skeleton()).to_vector()[None]))[0].data
    assert np.array_equal(a, b)


def test_bone_scales(skeleton):
    np.testing.assert_array_equal(bone_scales(skeleton, np.zeros(4)), np.ones(17))
    basis = np.zeros((17, 4))
    basis[3, 0] = 1.0
    sk = Skeleton(skeleton.parents, skeleton.rest_offsets, skeleton.part_of_joint, skeleton.girth, basis)
    sc = bone_scales(sk, np.array([np.log(2.0), 0, 0, 0]))
    assert sc[3] == pytest.approx(2.0)
    np.testing.assert_array_equal(np.delete(sc, 3), np.ones(16))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=4, max_size=4))
def test_bone_scales_positive(beta):
    assert np.all(bone_scales(default_skeleton(), np.array(beta)) > 0)


def test_shape_basis_orthonormal():
    S = make_shape_basis(17, 4, 5)
    np.testing.assert_allclose(S.T @ S, np.eye(4), atol=1e-12)
    assert np.array_equal(S, make_shape_basis(17, 4, 5))


def test_mesh_counts_and_semantics(skeleton):
    mesh = pose_mesh(skeleton, a_pose(skeleton))
    assert mesh.vertices.shape == (128, 3)
    assert mesh.triangles.shape == (192, 3)
    assert mesh.triangles.max() < 128
    np.testing.assert_array_equal(mesh.vertex_semantics.sum(axis=1), 2.0)
    labels = mesh.triangle_labels
    assert labels.min() >= 0 and labels.max() < skeleton.num_parts
    # every triangle of a prism is unanimous
    parts = np.argmax(mesh.vertex_semantics[:, :-1], axis=1)[mesh.triangles]
    assert np.all(parts == parts[:, :1])


def test_rest_mesh_is_rigid_transform_of_corners(skeleton, rng):
    R = random_rotation(rng)
    t = np.array([0.1, -0.2, 3.0])
    s = ModelState(np.zeros(48), np.zeros(4), matrix_to_rot6d(R), t)
    verts = pose_mesh(skeleton, s).vertices
    corners = prism_rest_corners(skeleton)
    rest = skeleton.rest_joints()
    expected = np.concatenate([(rest[skeleton.parents[j]][:, None] + corners[j - 1]).T for j in range(1, 17)])
    np.testing.assert_allclose(verts, expected @ R.T + t, atol=1e-12)


def test_rigid_equivariance(skeleton, rng):
    for _ in range(5):
        s = sample_state(rng, 0.3, 0.5, skeleton=skeleton)
        Q = random_rotation(rng)
        R = rot6d_to_matrix(s.r)
        moved = ModelState(s.theta, s.beta, matrix_to_rot6d(Q @ R), Q @ s.t)
        np.testing.assert_allclose(pose_joints(skeleton, moved), pose_joints(skeleton, s) @ Q.T, atol=1e-12)
        np.testing.assert_allclose(pose_mesh(skeleton, moved).vertices, pose_mesh(skeleton, s).vertices @ Q.T, atol=1e-12)


def test_kinematics_gradients(skeleton, rng):
    w = rng.standard_normal((17, 3))
    wv = rng.standard_normal((128, 3))
    for _ in range(10):
        x = sample_state(rng, 0.3, 0.5, skeleton=skeleton).to_vector()
        assert dc.check_gradient(lambda s: dc.sum_(pose_joints(skeleton, s) * w), x) < 1e-4
        assert dc.check_gradient(lambda s: dc.sum_(pose_mesh(skeleton, s).vertices * wv), x) < 1e-4


def test_prior_examples(skeleton):
    assert prior_loss(a_pose(skeleton)) == 0.0
    theta = np.zeros(48)
    theta[0] = 1.0
    assert prior_loss(ModelState(theta, [2.0, 0, 0, 0])) == 5.0
    x = sample_state(3, 0.3, 0.5).to_vector()
    v = dc.Value(x, requires_grad=True)
    (g,) = dc.gradient(prior_loss(v, skeleton), [v])
    np.testing.assert_allclose(g[:52], 2 * x[:52])
    np.testing.assert_array_equal(g[52:], 0.0)


def test_sample_state_examples(skeleton):
    s = sample_state(4, 0.0, 0.0, skeleton=skeleton)
    assert np.all(s.theta == 0) and np.all(s.beta == 0)
    a, b = sample_state(9, 0.3, 0.5), sample_state(9, 0.3, 0.5)
    np.testing.assert_array_equal(a.to_vector(), b.to_vector())
    thetas = np.stack([sample_state(np.random.default_rng(i), 0.3, 0.5).theta for i in range(1000)])
    std = thetas.std(axis=0)
    assert np.all((std > 0.27) & (std < 0.33))
    with pytest.raises(ValueError):
        sample_state(0, -1.0, 0.0)


def test_skeleton_validation(skeleton):
    with pytest.raises(ValueError):
        Skeleton(np.array([0, 2, 1]), np.ones((3, 3)), np.zeros(3, int), np.ones(3), np.ones((3, 1)))
    offsets = skeleton.rest_offsets.copy()
    offsets[5] = 0
    with pytest.raises(ValueError):
        Skeleton(skeleton.parents, offsets, skeleton.part_of_joint, skeleton.girth, skeleton.shape_basis)


def test_skeleton_dict_round_trip(skeleton):
    back = Skeleton.from_dict(skeleton.to_dict())
    np.testing.assert_array_equal(back.shape_basis, skeleton.shape_basis)
    np.testing.assert_array_equal(back.rest_offsets, skeleton.rest_offsets)


def test_state_vector_round_trip(skeleton):
    s = sample_state(1, 0.3, 0.5)
    back = ModelState.from_vector(s.to_vector(), skeleton)
    np.testing.assert_array_equal(back.to_vector(), s.to_vector())
    assert s.is_finite()
    assert np.array_equal(ModelState(np.zeros(48), np.zeros(4)).r, IDENTITY_6D)
