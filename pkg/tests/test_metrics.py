import csv
import json

import numpy as np
import pytest

from collab_retarget.body import Pose
from collab_retarget.errors import LengthMismatch
from collab_retarget.metrics import (MetricReport, contact_accuracy, contact_flags, evaluate, mpjpe,
                                     object_errors, penetration_rate, sequence_mpjpe)
from collab_retarget.geometry import TriMesh
from collab_retarget.motion import MotionSequence, ObjectTrack, hand_distances


def test_identity_is_zero(carry, source_box):
    rep = evaluate(carry, carry, source_box)
    assert rep.J_e == 0 and rep.T_e == 0 and rep.R_e == 0 and rep.C_acc == 100.0


def test_rotation_error_90_degrees():
    a = ObjectTrack(np.zeros((3, 3)), np.zeros((3, 3)))
    b = ObjectTrack(np.tile([0.0, 0.0, np.pi / 2], (3, 1)), np.zeros((3, 3)))
    t_e, r_e = object_errors(b, a)
    assert t_e == 0 and abs(r_e - 90.0) <= 1e-6


def test_translation_error_mm():
    a = ObjectTrack(np.zeros((2, 3)), np.zeros((2, 3)))
    b = ObjectTrack(np.zeros((2, 3)), [[0.003, 0, 0], [0, 0.004, 0]])
    assert object_errors(b, a)[0] == pytest.approx(3.5)


def test_mpjpe_translation(carry):
    a = carry.agents[0]
    moved = Pose(a.theta, a.root_orient, a.root_transl + [0.0, 0.0, 0.01])
    assert mpjpe(moved, a, carry.bodies[0]) == pytest.approx(10.0)
    assert mpjpe(moved, a, carry.bodies[0], root_relative=True) == pytest.approx(0.0, abs=1e-9)


def test_mpjpe_length_mismatch(carry):
    with pytest.raises(LengthMismatch):
        mpjpe(carry.agents[0][:5], carry.agents[0], carry.bodies[0])


def test_contact_boundary_exactly_5cm():
    seq = MotionSequence(ObjectTrack(np.zeros((2, 3)), np.zeros((2, 3))), (Pose.zero(2), Pose.zero(2)))
    tips = seq.fingertips()
    # object origin placed on the lowest tip, so that tip has local coordinates exactly 0
    low = np.unravel_index(np.argmin(tips[:, 0, :, 2]), (2, 10))
    origin = tips[low[0], :, low[1]]
    big = 10.0
    plane = TriMesh(np.array([[-big, -big, -0.05], [big, -big, -0.05], [0.0, big, -0.05]]), [[0, 1, 2]])
    at = seq.with_(object=ObjectTrack(np.zeros((2, 3)), origin))
    d = hand_distances(at, plane)
    hand = 2 * low[0] + low[1] // 5
    assert np.all(d[:, hand] == 0.05) and (d >= 0.05).all()
    assert not contact_flags(at, plane)[:, hand].any()
    closer = seq.with_(object=ObjectTrack(np.zeros((2, 3)), origin + [0.0, 0.0, 1e-9]))
    assert contact_flags(closer, plane)[:, hand].all()
    assert contact_accuracy(at, closer, plane) < 100.0


def test_contact_accuracy_counts(carry, source_box):
    assert contact_accuracy(carry, carry, source_box) == 100.0
    far = carry.with_(object=ObjectTrack(carry.object.rotations, carry.object.translations + [5.0, 0, 0]))
    flags = contact_flags(carry, source_box)
    assert contact_accuracy(far, carry, source_box) == pytest.approx(100.0 * (1 - flags.mean()))


def test_penetration_rate(carry, source_box):
    assert penetration_rate(carry, source_box) < 1.0
    # drop the object onto agent 1's pelvis
    pelvis = carry.joints()[0, :, 0]
    inside = carry.with_(object=ObjectTrack(carry.object.rotations, pelvis))
    assert penetration_rate(inside, source_box) > 5.0


def test_report_io(tmp_path):
    r = MetricReport(1.0, 2.0, 3.0, 99.5, 0.25)
    r.write_json(tmp_path / "m.json")
    assert json.loads((tmp_path / "m.json").read_text()) == r.to_dict()
    r.write_csv(tmp_path / "m.csv")
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["metric", "value"] and rows[1] == ["J_e", "1.0"]


def test_sequence_mpjpe_symmetric(carry, handover):
    assert sequence_mpjpe(carry, handover) == pytest.approx(sequence_mpjpe(handover, carry))
