import json

import numpy as np
import pytest

from collab_retarget.body import Pose
from collab_retarget.errors import ParseError, SchemaVersionMismatch
from collab_retarget.motion import (CONTACT_THRESHOLD, MotionSequence, ObjectTrack, contact_labels,
                                    generate_toy_scene, hand_distances, read_motion, sequence_to_dict,
                                    smootherstep, write_motion)


def test_contact_threshold_strict():
    d = np.array([0.0, 0.0499999, 0.05, 0.2])
    assert contact_labels(d).tolist() == [True, True, False, False]
    assert CONTACT_THRESHOLD == 0.05


def test_object_track_transforms(rng):
    tr = ObjectTrack(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)))
    pts = rng.normal(size=(6, 3))
    world = tr.transform(pts)
    assert np.allclose(tr.to_object_frame(world), pts[None], atol=1e-12)
    with pytest.raises(ValueError):
        ObjectTrack(np.zeros((3, 3)), np.zeros((2, 3)))


def test_sequence_validation():
    tr = ObjectTrack(np.zeros((3, 3)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        MotionSequence(tr, (Pose.zero(3),))
    with pytest.raises(ValueError):
        MotionSequence(tr, (Pose.zero(3), Pose.zero(4)))
    with pytest.raises(ValueError):
        MotionSequence(tr, (Pose.zero(3), Pose.zero(3)), label="dance")


def test_round_trip(tmp_path, carry):
    write_motion(carry, tmp_path / "c.m4d.json")
    back = read_motion(tmp_path / "c.m4d.json")
    assert np.array_equal(back.object.rotations, carry.object.rotations)
    assert all(a.allclose(b) for a, b in zip(back.agents, carry.agents))
    assert np.array_equal(back.contacts, carry.contacts)
    assert back.meta == carry.meta and back.label == carry.label


def test_schema_version_mismatch(tmp_path, carry):
    d = sequence_to_dict(carry)
    d["schema_version"] = "core-retarget/0"
    (tmp_path / "v.json").write_text(json.dumps(d))
    with pytest.raises(SchemaVersionMismatch):
        read_motion(tmp_path / "v.json")


def test_parse_errors(tmp_path, carry):
    d = sequence_to_dict(carry)
    d["agents"][1]["root_transl"] = d["agents"][1]["root_transl"][:-1]
    (tmp_path / "s.json").write_text(json.dumps(d))
    with pytest.raises(ParseError) as exc:
        read_motion(tmp_path / "s.json")
    assert exc.value.field == "agents[1].root_transl"
    (tmp_path / "bad.json").write_text('{"schema_version":\n  oops}')
    with pytest.raises(ParseError) as exc:
        read_motion(tmp_path / "bad.json")
    assert exc.value.line == 2


def test_smootherstep_endpoints():
    assert smootherstep(0.0) == 0.0 and smootherstep(1.0) == 1.0 and smootherstep(0.5) == 0.5
    assert smootherstep(-1.0) == 0.0 and smootherstep(2.0) == 1.0


@pytest.mark.parametrize("kind", ["carry", "handover"])
def test_toy_scene_properties(kind, carry, handover, source_box):
    seq = carry if kind == "carry" else handover
    assert len(seq) == 30 and seq.contacts.shape == (30, 4)
    assert seq.joints()[..., 2].min() > 0
    d = hand_distances(seq, source_box)
    assert np.array_equal(seq.contacts, d < CONTACT_THRESHOLD)
    # every hand touches the object at some point and none stays glued throughout
    assert seq.contacts.any(axis=0).all() and not seq.contacts.all()
    # held contact sits at the scripted 3 mm gap; approach frames fill the rest of the band
    assert abs(np.median(d[seq.contacts]) - 0.003) < 1e-3


def test_handover_pattern(handover):
    c = handover.contacts
    # agent 1 holds first, agent 2 last
    assert c[0, :2].all() and not c[0, 2:].any()
    assert c[-1, 2:].all() and not c[-1, :2].any()
    assert (c[:, :2].any(1) & c[:, 2:].any(1)).any()


def test_toy_scene_deterministic(source_box):
    a = generate_toy_scene("carry", 12, source_box, seed=3)
    b = generate_toy_scene("carry", 12, source_box, seed=3)
    assert np.array_equal(a.agents[0].theta, b.agents[0].theta)
    with pytest.raises(ValueError):
        generate_toy_scene("dance", 12, source_box)
    with pytest.raises(ValueError):
        generate_toy_scene("carry", 5, source_box)
