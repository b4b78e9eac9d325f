import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from occmotion import autodiff as ad
from occmotion.errors import DegenerateInputError
from occmotion.kinematics import (SMPL_PARENTS, KinematicTree, axis_angle_from_matrix, axis_angle_from_matrix_t,
                                  forward_kinematics, forward_kinematics_t, local_swing_twist,
                                  matrix_from_axis_angle, matrix_to_rot6d, quat_from_axis_angle, quat_mul,
                                  quat_rotate, quat_to_matrix, rot6d_to_matrix, rot6d_to_matrix_t,
                                  swing_from_joint_positions, swing_from_positions, swing_twist_decompose,
                                  twist_angle, validate_parents)

IDENT_Q = np.array([1.0, 0.0, 0.0, 0.0])


def random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def random_rotations(rng, n):
    return quat_to_matrix(random_quats(rng, n))


def same_rotation(a, b, atol):
    # q and -q encode one rotation
    return min(np.abs(a - b).max(), np.abs(a + b).max()) <= atol


# ---------------------------------------------------------------- 6D decode


def test_rot6d_identity_and_scale_invariance():
    e = np.array([1.0, 0, 0, 0, 1.0, 0])
    np.testing.assert_allclose(rot6d_to_matrix(e), np.eye(3), atol=1e-15)
    np.testing.assert_allclose(rot6d_to_matrix(2 * e), np.eye(3), atol=1e-15)


def test_rot6d_random_on_so3(rng):
    R = rot6d_to_matrix(rng.normal(size=(5000, 6)))
    err = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max()
    assert err <= 1e-6
    assert np.abs(np.linalg.det(R) - 1.0).max() <= 1e-6


def test_rot6d_degenerate_inputs_raise():
    with pytest.raises(DegenerateInputError):
        rot6d_to_matrix(np.zeros(6))
    with pytest.raises(DegenerateInputError):
        rot6d_to_matrix(np.array([1.0, 0, 0, 2.0, 0, 0]))


def test_rot6d_round_trip(rng):
    R = random_rotations(rng, 100)
    np.testing.assert_allclose(rot6d_to_matrix(matrix_to_rot6d(R)), R, atol=1e-12)


def test_rot6d_tensor_matches_numpy(rng):
    r = rng.normal(size=(7, 6))
    with ad.float64_mode():
        np.testing.assert_allclose(rot6d_to_matrix_t(ad.Tensor(r)).numpy(), rot6d_to_matrix(r), atol=1e-12)


# ------------------------------------------------------------- swing/twist


def test_swing_twist_identity():
    s, t = swing_twist_decompose(IDENT_Q, [0.0, 1.0, 0.0])
    np.testing.assert_allclose(s, IDENT_Q)
    np.testing.assert_allclose(t, IDENT_Q)


def test_swing_twist_pure_twist():
    axis = np.array([0.0, 0.6, 0.8])
    q = quat_from_axis_angle(axis * 1.1)
    s, t = swing_twist_decompose(q, axis)
    np.testing.assert_allclose(s, IDENT_Q, atol=1e-12)
    np.testing.assert_allclose(t, q, atol=1e-12)
    assert abs(twist_angle(t, axis) - 1.1) < 1e-12


def test_swing_twist_recomposition_1000_cases(rng):
    q = random_quats(rng, 1000)
    axis = rng.normal(size=(1000, 3))
    axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
    s, t = swing_twist_decompose(q, axis)
    err = np.minimum(np.abs(quat_mul(s, t) - q).max(-1), np.abs(quat_mul(s, t) + q).max(-1))
    assert err.max() <= 1e-9
    # twist is a rotation about the axis; swing moves the axis without spinning about it
    np.testing.assert_allclose(np.cross(t[:, 1:], axis), 0.0, atol=1e-12)
    np.testing.assert_allclose(np.sum(s[:, 1:] * axis, -1), 0.0, atol=1e-12)


def test_swing_twist_half_turn_perpendicular_gives_identity_twist():
    q = quat_from_axis_angle(np.array([np.pi, 0.0, 0.0]))
    s, t = swing_twist_decompose(q, [0.0, 1.0, 0.0])
    np.testing.assert_allclose(t, IDENT_Q, atol=1e-12)
    assert same_rotation(s, q, 1e-12)


def test_swing_from_positions_examples(rng):
    np.testing.assert_allclose(swing_from_positions([0, 1.0, 0], [0, 1.0, 0]), IDENT_Q, atol=1e-15)
    q = swing_from_positions([1.0, 0, 0], [0, 1.0, 0])
    np.testing.assert_allclose(q, quat_from_axis_angle([0, 0, np.pi / 2]), atol=1e-12)
    a, b = rng.normal(size=(500, 3)), rng.normal(size=(500, 3))
    a /= np.linalg.norm(a, axis=-1, keepdims=True)
    b /= np.linalg.norm(b, axis=-1, keepdims=True)
    np.testing.assert_allclose(quat_rotate(swing_from_positions(a, b), a), b, atol=1e-9)


def test_swing_from_positions_antiparallel():
    a = np.array([0.0, 0.0, 1.0])
    q = swing_from_positions(a, -a)
    np.testing.assert_allclose(quat_rotate(q, a), -a, atol=1e-12)


# ------------------------------------------------------------- axis-angle


def test_axis_angle_examples():
    np.testing.assert_array_equal(axis_angle_from_matrix(np.eye(3)), np.zeros(3))
    Rz = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    np.testing.assert_allclose(axis_angle_from_matrix(Rz), [0, 0, np.pi / 2], atol=1e-12)
    np.testing.assert_allclose(matrix_from_axis_angle([0, 0, np.pi / 2]), Rz, atol=1e-12)


def test_axis_angle_round_trip_500(rng):
    R = random_rotations(rng, 500)
    np.testing.assert_allclose(matrix_from_axis_angle(axis_angle_from_matrix(R)), R, atol=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, np.pi), st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_axis_angle_round_trip_property(angle, x, y, z):
    v = np.array([x, y, z])
    if np.linalg.norm(v) < 1e-3:
        v = np.array([0.0, 0.0, 1.0])
    aa = v / np.linalg.norm(v) * angle
    R = matrix_from_axis_angle(aa)
    np.testing.assert_allclose(matrix_from_axis_angle(axis_angle_from_matrix(R)), R, atol=1e-6)


def test_axis_angle_near_pi():
    axis = np.array([1.0, 2.0, -2.0]) / 3.0
    for angle in (np.pi, np.pi - 1e-8, np.pi - 1e-4):
        R = matrix_from_axis_angle(axis * angle)
        np.testing.assert_allclose(matrix_from_axis_angle(axis_angle_from_matrix(R)), R, atol=1e-6)


def test_axis_angle_tensor_matches_numpy(rng):
    R = random_rotations(rng, 50)
    with ad.float64_mode():
        np.testing.assert_allclose(axis_angle_from_matrix_t(ad.Tensor(R)).numpy(), axis_angle_from_matrix(R),
                                   atol=1e-9)


# -------------------------------------------------------------------- trees


def _toy_tree(rng):
    return KinematicTree(SMPL_PARENTS, rng.normal(0, 0.2, size=(24, 3)) * (np.arange(24) > 0)[:, None])


def test_validate_parents():
    validate_parents(SMPL_PARENTS)
    with pytest.raises(ValueError):
        validate_parents([-1, 2, 0])
    with pytest.raises(ValueError):
        validate_parents([0, -1])


def test_fk_identity_is_cumulative_offsets(rng):
    tree = _toy_tree(rng)
    root = np.array([0.3, -0.1, 2.0])
    pos, _ = forward_kinematics(tree, np.broadcast_to(np.eye(3), (24, 3, 3)), root)
    expect = np.zeros((24, 3))
    expect[0] = root
    for j in range(1, 24):
        expect[j] = expect[SMPL_PARENTS[j]] + tree.rest_offsets[j]
    np.testing.assert_allclose(pos, expect, atol=1e-14)


def test_fk_root_rotation_rotates_rest_skeleton(rng):
    tree = _toy_tree(rng)
    rots = np.broadcast_to(np.eye(3), (24, 3, 3)).copy()
    Rz = matrix_from_axis_angle([0, 0, np.pi / 2])
    rots[0] = Rz
    pos, _ = forward_kinematics(tree, rots)
    np.testing.assert_allclose(pos, tree.rest_positions() @ Rz.T, atol=1e-12)


def test_fk_swing_twist_round_trip(rng):
    tree = _toy_tree(rng)
    rots = random_rotations(rng, 24)
    s, t = local_swing_twist(tree, rots)
    pos0, _ = forward_kinematics(tree, rots)
    pos1, _ = forward_kinematics(tree, quat_to_matrix(quat_mul(s, t)))
    np.testing.assert_allclose(pos1, pos0, atol=1e-9)


def test_analytic_swing_with_true_twists_reproduces_fk(rng):
    tree = _toy_tree(rng)
    rots = random_rotations(rng, 24)
    _, t = local_swing_twist(tree, rots)
    twists = twist_angle(t, tree.twist_axes())
    pos, _ = forward_kinematics(tree, rots)
    rec = swing_from_joint_positions(tree, pos, twists, root_rot=rots[0])
    pos_rec, _ = forward_kinematics(tree, rec, pos[0])
    np.testing.assert_allclose(pos_rec, pos, atol=1e-6)


def test_fk_tensor_matches_numpy(rng):
    tree = _toy_tree(rng)
    rots = random_rotations(rng, 2 * 24).reshape(2, 24, 3, 3)
    pos, G = forward_kinematics(tree, rots)
    with ad.float64_mode():
        pos_t, G_t = forward_kinematics_t(SMPL_PARENTS, ad.Tensor(rots), ad.Tensor(tree.rest_offsets))
    np.testing.assert_allclose(pos_t.numpy(), pos, atol=1e-12)
    np.testing.assert_allclose(G_t.numpy(), G, atol=1e-12)
