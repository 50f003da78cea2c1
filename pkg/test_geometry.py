"""
Test script for rotations, forward kinematics and foot contacts.
"""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from app.core import autodiff as ad
from app.core.autodiff import gradcheck
from app.core.exceptions import DegenerateRotationError
from app.core.geometry import (
    axis_angle_to_matrix, euler_to_matrix, geodesic_distance, is_rotation, matrix_to_euler, matrix_to_quaternion,
    matrix_to_rot6d, quaternion_to_matrix, rot6d_to_matrix, slerp_rotations,
)
from app.core.kinematics import (
    detect_contacts, finite_difference_velocity, foot_loss, foot_penetration_penalty, foot_report,
    foot_sliding_penalty, forward_kinematics,
)
from app.schemas.motion import ContactMask, Joint, Skeleton


def _rotations(n, seed=0):
    return Rotation.random(n, random_state=seed).as_matrix()


def _rz(deg):
    return Rotation.from_euler("z", deg, degrees=True).as_matrix()


def _chain(offsets):
    joints = [Joint(name="root", parent=None)]
    for i, offset in enumerate(offsets, start=1):
        joints.append(Joint(name=f"j{i}", parent=i - 1, offset=tuple(offset)))
    return Skeleton(joints=joints, foot_joints=[len(offsets)])


# ============================================================================
# Rot6D
# ============================================================================

def test_identity_rot6d_decodes_to_identity():
    np.testing.assert_allclose(rot6d_to_matrix(np.array([1.0, 0, 0, 0, 1.0, 0])), np.eye(3))


def test_scaled_columns_decode_to_identity():
    np.testing.assert_allclose(rot6d_to_matrix(np.array([2.0, 0, 0, 0, 3.0, 0])), np.eye(3))


def test_random_rot6d_decodes_to_rotations():
    r6 = np.random.default_rng(3).standard_normal((50, 6))
    matrices = rot6d_to_matrix(r6)
    eye = np.broadcast_to(np.eye(3), matrices.shape)
    np.testing.assert_allclose(np.swapaxes(matrices, -1, -2) @ matrices, eye, atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(matrices), 1.0, atol=1e-12)


def test_matrix_round_trip():
    matrices = _rotations(20)
    np.testing.assert_allclose(rot6d_to_matrix(matrix_to_rot6d(matrices)), matrices, atol=1e-12)


def test_identity_and_quarter_turn_encodings():
    np.testing.assert_allclose(matrix_to_rot6d(np.eye(3)), [1, 0, 0, 0, 1, 0])
    np.testing.assert_allclose(matrix_to_rot6d(_rz(90)), [0, 1, 0, -1, 0, 0], atol=1e-15)


def test_degenerate_input_names_the_index():
    r6 = np.tile([1.0, 0, 0, 0, 1.0, 0], (2, 3, 1))
    r6[1, 2] = [1.0, 0, 0, 2.0, 0, 0]
    with pytest.raises(DegenerateRotationError) as info:
        rot6d_to_matrix(r6)
    assert info.value.index == (1, 2)
    assert info.value.code == "E_ROT_DEGENERATE"


def test_rot6d_is_continuous_through_half_turn():
    angles = np.linspace(170.0, 190.0, 41)
    r6 = matrix_to_rot6d(Rotation.from_euler("z", angles, degrees=True).as_matrix())
    steps = np.linalg.norm(np.diff(r6, axis=0), axis=-1)
    assert steps.max() <= 10.0 * steps.mean()


# ============================================================================
# Geodesic distance
# ============================================================================

def test_geodesic_known_angles():
    half_turn = Rotation.from_rotvec([0.3, -0.5, 0.8] / np.linalg.norm([0.3, -0.5, 0.8]) * np.pi).as_matrix()
    assert geodesic_distance(np.eye(3), np.eye(3)) == pytest.approx(0.0, abs=1e-12)
    assert geodesic_distance(np.eye(3), half_turn) == pytest.approx(np.pi, abs=1e-6)
    quarter_x = Rotation.from_euler("x", 90, degrees=True).as_matrix()
    assert geodesic_distance(np.eye(3), quarter_x) == pytest.approx(np.pi / 2, abs=1e-12)


def test_geodesic_symmetry_and_left_invariance():
    a, b, q = _rotations(10, 1), _rotations(10, 2), _rotations(10, 3)
    np.testing.assert_array_equal(geodesic_distance(a, b), geodesic_distance(b, a))
    np.testing.assert_allclose(geodesic_distance(q @ a, q @ b), geodesic_distance(a, b), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 3.0))
def test_geodesic_recovers_rotation_angle(angle):
    matrix = axis_angle_to_matrix(np.array([0.0, 0.6, 0.8]), np.array(angle))
    assert geodesic_distance(np.eye(3), matrix) == pytest.approx(angle, abs=1e-7)


def test_geodesic_on_tensors_is_differentiable():
    target = rot6d_to_matrix(np.random.default_rng(5).standard_normal((4, 6)))
    fn = lambda r6: ad.mean(geodesic_distance(rot6d_to_matrix(r6), target))
    assert gradcheck(fn, [np.random.default_rng(6).standard_normal((4, 6))]) <= 1e-4


# ============================================================================
# File-boundary conversions
# ============================================================================

def test_intrinsic_euler_order():
    matrix = euler_to_matrix(np.array([90.0, 0.0, 0.0]), "ZXY")
    np.testing.assert_allclose(matrix, _rz(90), atol=1e-12)
    angles = np.array([[10.0, -20.0, 30.0]])
    np.testing.assert_allclose(matrix_to_euler(euler_to_matrix(angles, "ZYX"), "ZYX"), angles, atol=1e-9)


def test_quaternion_round_trip_and_is_rotation():
    matrices = _rotations(5, 9)
    np.testing.assert_allclose(quaternion_to_matrix(matrix_to_quaternion(matrices)), matrices, atol=1e-12)
    assert is_rotation(matrices)
    assert not is_rotation(2.0 * np.eye(3))


def test_slerp_hits_keys_and_midpoint():
    keys = np.stack([np.eye(3), _rz(90)])[:, None]
    out = slerp_rotations([0.0, 1.0], keys, [0.0, 0.5, 1.0])
    np.testing.assert_allclose(out[0, 0], np.eye(3), atol=1e-12)
    np.testing.assert_allclose(out[1, 0], _rz(45), atol=1e-12)
    np.testing.assert_allclose(out[2, 0], _rz(90), atol=1e-12)


# ============================================================================
# Forward kinematics
# ============================================================================

def test_identity_pose_accumulates_offsets():
    skeleton = _chain([(0, -10, 0), (0, -10, 0), (5, 0, 0)])
    root = np.array([[1.0, 30.0, 2.0]])
    positions = forward_kinematics(skeleton, np.tile(np.eye(3), (1, 4, 1, 1)), root)
    expected = root[0] + np.cumsum(skeleton.offsets, axis=0)
    np.testing.assert_allclose(positions[0], expected)


def test_quarter_turn_on_two_bone_chain():
    skeleton = _chain([(1, 0, 0), (1, 0, 0)])
    rotations = np.stack([np.eye(3), _rz(90), np.eye(3)])[None]
    positions = forward_kinematics(skeleton, rotations, np.zeros((1, 3)))
    np.testing.assert_allclose(positions[0, 2], [1.0, 1.0, 0.0], atol=1e-12)


def test_fk_matches_matrix_chain_oracle():
    rng = np.random.default_rng(11)
    joints = [Joint(name="root", parent=None)]
    parents = [None, 0, 1, 1, 0, 4]
    for j in range(1, len(parents)):
        joints.append(Joint(name=f"j{j}", parent=parents[j], offset=tuple(rng.uniform(-10, 10, 3))))
    skeleton = Skeleton(joints=joints)
    rotations = _rotations(3 * len(parents), 12).reshape(3, len(parents), 3, 3)
    root = rng.uniform(-5, 5, (3, 3))
    positions = forward_kinematics(skeleton, rotations, root)
    for t in range(3):
        for j in range(len(parents)):
            chain, k = [], j
            while k is not None:
                chain.append(k)
                k = parents[k]
            chain.reverse()
            point, rot = root[t].copy(), np.eye(3)
            for a, b in zip(chain[:-1], chain[1:]):
                rot = rot @ rotations[t, a]
                point = point + rot @ skeleton.offsets[b]
            np.testing.assert_allclose(positions[t, j], point, atol=1e-10)


def test_fk_root_row_and_translation_equivariance():
    skeleton = _chain([(0, -10, 0), (0, -10, 0)])
    rotations = _rotations(12, 4).reshape(4, 3, 3, 3)
    root = np.random.default_rng(2).uniform(-5, 5, (4, 3))
    base = forward_kinematics(skeleton, rotations, root)
    np.testing.assert_array_equal(base[:, 0], root)
    shift = np.array([3.0, -1.0, 7.0])
    np.testing.assert_allclose(forward_kinematics(skeleton, rotations, root + shift), base + shift, atol=1e-12)


def test_fk_gradient_check():
    skeleton = _chain([(0, -10, 0), (3, -10, 0)])
    target = np.random.default_rng(8).uniform(-10, 10, (2, 3, 3))
    fn = lambda r6: ad.mean(ad.square(forward_kinematics(skeleton, r6, np.zeros((2, 3))) - target))
    assert gradcheck(fn, [np.random.default_rng(9).standard_normal((2, 3, 6))]) <= 1e-4


# ============================================================================
# Contacts and foot penalties
# ============================================================================

def _feet(heights, xs, frames=10):
    positions = np.zeros((frames, 2, 3))
    positions[:, 0, 1] = heights
    positions[:, 0, 0] = xs
    positions[:, 1, 1] = 100.0
    return positions


def test_static_foot_on_ground_is_all_contact():
    mask = detect_contacts(_feet(0.0, 0.0), [0])
    assert mask.mask.all()
    assert mask.duty_cycle == 1.0


def test_high_foot_is_never_in_contact():
    assert not detect_contacts(_feet(20.0, 0.0), [0], height_threshold=2.0).mask.any()


def test_sliding_speed_of_grounded_foot():
    frames = 30
    xs = 3.0 * np.arange(frames) / 60.0
    positions = _feet(0.0, xs, frames)
    mask = ContactMask(mask=np.ones((frames, 1), dtype=bool), foot_joints=[0])
    assert foot_sliding_penalty(positions, mask, 60.0) == pytest.approx(3.0)
    static = ContactMask(mask=np.ones((frames, 1), dtype=bool), foot_joints=[0])
    assert foot_sliding_penalty(_feet(0.0, 0.0, frames), static, 60.0) == 0.0


def test_no_contact_gives_zero_with_note():
    report = foot_report(_feet(50.0, 0.0), [0], 60.0)
    assert report["foot_sliding"]["value"] == 0.0
    assert report["foot_sliding"]["notes"] == ["no-contact"]


def test_penetration_mean():
    positions = np.zeros((5, 2, 3))
    positions[:, 0, 1] = -2.0
    positions[:, 1, 1] = 5.0
    assert foot_penetration_penalty(positions, [0, 1]) == pytest.approx(1.0)


def test_penetration_matches_loop():
    heights = np.random.default_rng(4).uniform(-3, 3, (12, 3))
    positions = np.zeros((12, 3, 3))
    positions[..., 1] = heights
    total = 0.0
    for t in range(12):
        for f in range(3):
            total += max(0.0, -heights[t, f])
    assert foot_penetration_penalty(positions, [0, 1, 2]) == pytest.approx(total / 36.0, abs=1e-15)


def test_finite_difference_uses_central_and_one_sided_steps():
    times = np.array([0.0, 0.1, 0.3, 0.6])
    x = times ** 2
    v = finite_difference_velocity(x[:, None], times)[:, 0]
    np.testing.assert_allclose(v[0], (0.01 - 0.0) / 0.1)
    np.testing.assert_allclose(v[1], (0.09 - 0.0) / 0.3)
    np.testing.assert_allclose(v[2], (0.36 - 0.01) / 0.5)
    np.testing.assert_allclose(v[3], (0.36 - 0.09) / 0.3)


def test_foot_loss_is_zero_on_matching_motion():
    positions = _feet(np.linspace(-1, 3, 10), np.linspace(0, 2, 10))
    mask = detect_contacts(positions, [0])
    times = np.arange(10) / 60.0
    assert foot_loss(positions, positions, mask, times).item() == pytest.approx(0.0, abs=1e-12)
    moved = positions.copy()
    moved[:, 0, 1] -= 1.0
    assert foot_loss(moved, positions, mask, times).item() > 0.0
