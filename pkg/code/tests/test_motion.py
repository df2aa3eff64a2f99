"""
动作表示测试：6D 旋转、正向运动学、舞者重排与合成数据
"""

import numpy as np
import pytest

from gdance import numerics as ops
from gdance.config import DatasetConfig
from gdance.exceptions import ConfigError, DegenerateRotationError, NumericError, ShapeError
from gdance.motion import (FOOT_JOINTS, NUM_JOINTS, POSE_DIM, GroupMotion, MusicTrack, Pose, angular_speed,
                           axis_angle_to_matrix, forward_kinematics, identity_rot6d, invert_permutation,
                           joint_positions_tensor, matrix_to_rot6d, motion_joint_positions, pack_pose,
                           rearrange_dancers, rot6d_to_matrix, rot6d_to_matrix_tensor, synth_dataset, unpack_pose)
from gdance.numerics import RngStream, Tensor, grad_check


def test_random_6d_inputs_give_proper_rotations():
    r = RngStream(0).generator.standard_normal((100000, 6))
    matrices = rot6d_to_matrix(r)
    gram = np.einsum('nji,njk->nik', matrices, matrices)
    assert np.max(np.abs(gram - np.eye(3))) < 1e-9
    assert np.all(np.linalg.det(matrices) > 0)
    assert np.max(np.abs(np.linalg.det(matrices) - 1.0)) < 1e-9


def test_6d_round_trip_recovers_rotation():
    rotation = axis_angle_to_matrix(np.array([0.0, 0.6, 0.8]), np.array(0.7))
    np.testing.assert_allclose(rot6d_to_matrix(matrix_to_rot6d(rotation)), rotation, atol=1e-12)


@pytest.mark.parametrize("r,which", [
    ([0.0, 0.0, 0.0, 0.0, 1.0, 0.0], 'a1'),
    ([1.0, 0.0, 0.0, 2.0, 0.0, 0.0], 'a2'),
])
def test_degenerate_6d_input_names_the_vector(r, which):
    with pytest.raises(DegenerateRotationError) as excinfo:
        rot6d_to_matrix(np.array(r))
    assert excinfo.value.vector == which


def test_differentiable_rotation_matches_numpy_and_gradients():
    r = RngStream(2).generator.standard_normal((3, 6))
    np.testing.assert_allclose(rot6d_to_matrix_tensor(Tensor(r)).numpy(), rot6d_to_matrix(r), atol=1e-12)
    weights = RngStream(3).generator.standard_normal((3, 3, 3))
    report = grad_check(lambda x: ops.sum(rot6d_to_matrix_tensor(x) * weights), r, tolerance=1e-4)
    assert report.passed, report


def test_rest_pose_fk_is_root_plus_offsets(skeleton):
    root = np.array([1.0, -2.0, 0.9])
    pose = Pose(identity_rot6d().reshape(NUM_JOINTS, 6), np.zeros(4), root)
    joints = forward_kinematics(pack_pose(pose), skeleton)
    expected = np.zeros((NUM_JOINTS, 3))
    expected[0] = root
    for joint in range(1, NUM_JOINTS):
        expected[joint] = expected[skeleton.parents[joint]] + skeleton.offsets[joint]
    np.testing.assert_allclose(joints, expected, atol=1e-12)


def test_bone_lengths_preserved_under_rotation(skeleton, make_motion):
    motion = make_motion(seed=4, frames=3, dancers=2)
    joints = motion_joint_positions(motion.poses, skeleton)
    for joint in range(1, NUM_JOINTS):
        bone = np.linalg.norm(joints[..., joint, :] - joints[..., skeleton.parents[joint], :], axis=-1)
        np.testing.assert_allclose(bone, np.linalg.norm(skeleton.offsets[joint]), atol=1e-10)


def test_tensor_fk_matches_numpy(skeleton, make_motion):
    poses = make_motion(seed=5, frames=2, dancers=2).poses
    np.testing.assert_allclose(joint_positions_tensor(Tensor(poses), skeleton).numpy(),
                               motion_joint_positions(poses, skeleton), atol=1e-12)


def test_pose_pack_unpack_and_contact_clamp():
    vector = np.concatenate([identity_rot6d(), [1.5, -0.2, 0.3, 0.4], [0.0, 0.0, 0.9]])
    pose = unpack_pose(vector)
    np.testing.assert_array_equal(pose.contacts, [1.0, 0.0, 0.3, 0.4])
    assert pack_pose(pose).shape == (POSE_DIM,)
    with pytest.raises(ShapeError):
        unpack_pose(np.zeros(150))


def test_group_motion_validation():
    with pytest.raises(ShapeError):
        GroupMotion(np.zeros((1, 2, POSE_DIM)))
    bad = np.zeros((3, 2, POSE_DIM))
    bad[1, 0, 5] = np.nan
    with pytest.raises(NumericError):
        GroupMotion(bad)
    with pytest.raises(ShapeError):
        MusicTrack(np.zeros(4))


def test_rearrange_orders_by_first_frame_x_then_y(make_motion):
    motion = make_motion(seed=6, frames=4, dancers=4)
    poses = motion.poses.copy()
    poses[0, :, 148:150] = [[2.0, 0.0], [-1.0, 3.0], [-1.0, 1.0], [0.5, 0.0]]
    arranged, permutation = rearrange_dancers(GroupMotion(poses))
    np.testing.assert_array_equal(permutation, [2, 1, 3, 0])
    np.testing.assert_array_equal(arranged.poses[:, invert_permutation(permutation)], GroupMotion(poses).poses)


def test_synth_dataset_is_deterministic_and_rearranged():
    config = DatasetConfig(dancers=3, frames=40, count=3, music_dim=6)
    first = synth_dataset(config, seed=9)
    second = synth_dataset(config, seed=9)
    for (m1, a1), (m2, a2) in zip(first, second):
        np.testing.assert_array_equal(m1.poses, m2.poses)
        np.testing.assert_array_equal(a1.features, a2.features)
        x = m1.roots_xy()[0, :, 0]
        assert np.all(np.diff(x) >= 0)
        assert a1.dim == 6 and a1.frames == 40


def test_synth_dancers_keep_clearance():
    config = DatasetConfig(dancers=4, frames=90, count=4)
    for motion, _ in synth_dataset(config, seed=1):
        roots = motion.roots_xy()
        distance = np.linalg.norm(roots[:, :, None] - roots[:, None, :], axis=-1)
        distance[:, np.arange(4), np.arange(4)] = np.inf
        assert distance.min() > 0.3


def test_synth_beats_align_with_angular_speed_peaks():
    config = DatasetConfig(dancers=2, frames=90, count=2)
    for item in synth_dataset(config, seed=3, with_metadata=True):
        speed = angular_speed(item.motion.dancer(0))
        pulses = np.flatnonzero(item.music.features[:, 0] > 0.5)
        np.testing.assert_array_equal(pulses, item.beat_frames)
        for beat in item.beat_frames:
            if 2 <= beat < item.motion.frames - 2:
                local = slice(max(beat - item.beat_period // 2, 1), min(beat + item.beat_period // 2 + 1,
                                                                          item.motion.frames - 1))
                peak = local.start + int(np.argmax(speed[local]))
                assert abs(peak - beat) <= 1


def test_synth_contacts_within_unit_interval():
    motion, _ = synth_dataset(DatasetConfig(dancers=2, frames=30, count=1), seed=0)[0]
    contacts = motion.poses[..., 144:148]
    assert contacts.min() >= 0.0 and contacts.max() <= 1.0
    assert len(FOOT_JOINTS) == 4


@pytest.mark.parametrize("changes,key", [
    ({'dancers': 6}, 'dataset.dancers'),
    ({'fps': 25.0}, 'dataset.fps'),
    ({'spacing': 1.0, 'radius': 0.4}, 'dataset.spacing'),
])
def test_synth_rejects_bad_config(changes, key):
    config = DatasetConfig(**changes)
    with pytest.raises(ConfigError) as excinfo:
        synth_dataset(config, seed=0)
    assert excinfo.value.key == key
