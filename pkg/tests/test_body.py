import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from collab_retarget.body import (JOINT_INDEX, N_JOINTS, PARENTS, ArticulatedBody, Capsules, Pose,
                                  fingertip_positions, fk_torch, forward_kinematics, points_in_capsules,
                                  segment_distance, surface_capsules)
from collab_retarget.errors import ParseError
from collab_retarget.rotations import aa_to_matrix, aa_to_matrix_t, canonical_aa, geodesic_angle, matrix_to_aa

BODY = ArticulatedBody.default()
angles = arrays(np.float64, (21, 3), elements=st.floats(-1.5, 1.5))


def test_default_body_is_symmetric():
    assert BODY.is_symmetric()
    assert BODY.offsets.shape == (N_JOINTS, 3) and not BODY.offsets[0].any()


def test_body_validation():
    with pytest.raises(ValueError):
        ArticulatedBody(np.full(21, 2.0), BODY.capsule_radii, BODY.fingertip_offsets)
    with pytest.raises(ParseError):
        ArticulatedBody.from_dict({"bone_lengths": {}})


def test_body_round_trip(tmp_path):
    BODY.write(tmp_path / "b.json")
    back = ArticulatedBody.read(tmp_path / "b.json")
    assert np.array_equal(back.bone_lengths, BODY.bone_lengths)
    assert np.array_equal(back.fingertip_offsets, BODY.fingertip_offsets)


def test_rest_pose_bone_lengths():
    rest = BODY.rest_joints()
    lengths = np.linalg.norm(rest[1:] - rest[PARENTS[1:]], axis=1)
    assert np.allclose(lengths, BODY.bone_lengths, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(angles)
def test_fk_preserves_bone_lengths(theta):
    pos, glob = forward_kinematics(BODY, Pose(theta, [0.1, -0.2, 0.3], [1.0, 2.0, 3.0]))
    lengths = np.linalg.norm(pos[1:] - pos[PARENTS[1:]], axis=1)
    assert np.allclose(lengths, BODY.bone_lengths, atol=1e-12)
    assert np.allclose(glob @ glob.transpose(0, 2, 1), np.eye(3), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(angles, arrays(np.float64, 3, elements=st.floats(-3, 3)), arrays(np.float64, 3, elements=st.floats(-2, 2)))
def test_fk_root_equivariance(theta, ro, rt):
    base, _ = forward_kinematics(BODY, Pose(theta, np.zeros(3), np.zeros(3)))
    moved, _ = forward_kinematics(BODY, Pose(theta, ro, rt))
    assert np.allclose(moved, base @ aa_to_matrix(ro).T + rt, atol=1e-12)


def test_fk_elbow_rotation_only_moves_descendants():
    th = np.zeros((21, 3))
    th[JOINT_INDEX["left_elbow"] - 1] = [0.0, 0.0, 1.0]
    a, _ = forward_kinematics(BODY, Pose.zero())
    b, _ = forward_kinematics(BODY, Pose(th, np.zeros(3), np.zeros(3)))
    moved = np.flatnonzero(np.linalg.norm(a - b, axis=1) > 1e-12)
    assert moved.tolist() == [JOINT_INDEX["left_wrist"]]


def test_fk_batched_matches_single(rng):
    th = rng.normal(0, 0.4, (5, 21, 3))
    ro, rt = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    pos, _ = forward_kinematics(BODY, Pose(th, ro, rt))
    for i in range(5):
        p, _ = forward_kinematics(BODY, Pose(th[i], ro[i], rt[i]))
        assert np.array_equal(pos[i], p)


def test_torch_fk_matches_numpy(rng):
    th = rng.normal(0, 0.4, (4, 21, 3))
    ro, rt = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    pos, glob = forward_kinematics(BODY, Pose(th, ro, rt))
    tp, tg = fk_torch(torch.tensor(th), torch.tensor(ro), torch.tensor(rt), BODY.offsets)
    assert np.allclose(tp.numpy(), pos, atol=1e-12) and np.allclose(tg.numpy(), glob, atol=1e-12)


def test_fingertips_ride_with_wrists(rng):
    pose = Pose(rng.normal(0, 0.3, (21, 3)), rng.normal(size=3), rng.normal(size=3))
    pos, glob = forward_kinematics(BODY, pose)
    tips = fingertip_positions(BODY, pose)
    w = JOINT_INDEX["right_wrist"]
    expect = pos[w] + BODY.fingertip_offsets[1] @ glob[w].T
    assert np.allclose(tips[5:], expect, atol=1e-12)


def test_pose_validation_and_flat(rng):
    with pytest.raises(ValueError):
        Pose(np.zeros((20, 3)), np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        Pose(np.full((21, 3), np.nan), np.zeros(3), np.zeros(3))
    p = Pose(rng.normal(size=(3, 21, 3)), rng.normal(size=(3, 3)), rng.normal(size=(3, 3)))
    assert Pose.from_flat(p.flat()).allclose(p)
    assert len(p) == 3 and p[1].theta.shape == (21, 3)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 3, elements=st.floats(-12, 12)))
def test_canonical_aa_same_rotation(v):
    c = canonical_aa(v)
    assert np.linalg.norm(c) <= np.pi + 1e-9
    assert np.allclose(aa_to_matrix(c), aa_to_matrix(v), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 3, elements=st.floats(-3, 3)))
def test_rotation_round_trip(v):
    r = aa_to_matrix(v)
    assert np.allclose(aa_to_matrix(matrix_to_aa(r)), r, atol=1e-10)
    assert np.allclose(aa_to_matrix_t(torch.tensor(v)).numpy(), r, atol=1e-12)


def test_geodesic_angle_exact():
    assert abs(geodesic_angle(aa_to_matrix([0, 0, np.pi / 2]), np.eye(3)) - np.pi / 2) < 1e-15
    assert geodesic_angle(np.eye(3), np.eye(3)) == 0.0


def test_segment_distance():
    d = segment_distance(np.array([[0.5, 1.0, 0.0], [2.0, 0.0, 0.0]]), np.zeros((1, 3)), np.array([[1.0, 0, 0]]))
    assert np.allclose(d[:, 0], [1.0, 1.0])


def test_points_in_capsules_strict():
    caps = Capsules(np.zeros((1, 3)), np.array([[1.0, 0, 0]]), np.array([0.1]))
    pts = np.array([[0.5, 0.05, 0.0], [0.5, 0.1, 0.0], [1.05, 0, 0], [1.2, 0, 0]])
    assert points_in_capsules(pts, caps).tolist() == [True, False, True, False]


def test_surface_capsules_shape():
    caps = surface_capsules(BODY, Pose.zero(4))
    assert caps.a.shape == (4, 21, 3) and len(caps) == 21
