import json

import numpy as np
import pytest
import torch

from collab_retarget.diffopt import OptimConfig
from collab_retarget.errors import ParseError, SchemaVersionMismatch
from collab_retarget.humanoid import (HUMANOID_OPTIM, HumanoidChain, HumanoidTrajectory, JointPairMap, chain_fk,
                                      chain_fk_t, pair_residual, retarget_humanoid, retarget_positions,
                                      root_guess)
from collab_retarget.rotations import aa_to_matrix

CHAIN = HumanoidChain.default()


def random_q(rng, n=()):
    """Joint angles well inside the limits with bent knees and elbows, so every axis is observable."""
    q = rng.uniform(-0.5, 0.5, size=n + (CHAIN.dof,))
    for name in ("left_knee", "right_knee"):
        q[..., CHAIN.joint_names.index(name)] = rng.uniform(0.4, 1.0, size=n)
    for name in ("left_elbow", "right_elbow"):
        q[..., CHAIN.joint_names.index(name)] = rng.uniform(-1.2, -0.5, size=n)
    return CHAIN.clamp(q)


def test_default_chain():
    assert CHAIN.dof == 19 and len(CHAIN.keypoint_names) == 1 + 19 + 5
    assert np.allclose(np.linalg.norm(CHAIN.axes, axis=1), 1.0)
    pairs = JointPairMap.default(CHAIN)
    assert len(pairs) >= 10


def test_chain_validation():
    d = json.loads(json.dumps({"joints": [{"name": "a", "parent": "b", "axis": [0, 0, 1], "offset": [0, 0, 0],
                                           "limits": [-1, 1]}]}))
    with pytest.raises(ParseError):
        HumanoidChain.from_dict(d)
    d["joints"][0]["parent"] = "root"
    d["joints"][0]["limits"] = [1, -1]
    with pytest.raises(ValueError):
        HumanoidChain.from_dict(d)


def test_pair_map_validation():
    with pytest.raises(ParseError):
        JointPairMap.from_names([("tail", "root")], CHAIN)
    with pytest.raises(ParseError):
        JointPairMap.from_names([("pelvis", "antenna")], CHAIN)
    with pytest.raises(ValueError):
        JointPairMap.from_names([("pelvis", "root"), ("spine1", "root")], CHAIN)


def test_fk_root_only_and_bone_lengths(rng):
    q = random_q(rng)
    ro, rt = rng.normal(size=3), rng.normal(size=3)
    p = chain_fk(CHAIN, q, ro, rt)
    z = chain_fk(CHAIN, q, np.zeros(3), np.zeros(3))
    assert np.allclose(p, z @ aa_to_matrix(ro).T + rt, atol=1e-12)
    for j, par in enumerate(CHAIN.parents):
        assert np.isclose(np.linalg.norm(p[j + 1] - p[par]), np.linalg.norm(CHAIN.offsets[j]))


def test_fk_torch_gradient_flows(rng):
    q = torch.tensor(random_q(rng), requires_grad=True)
    pos = chain_fk_t(CHAIN, q, torch.zeros(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64))
    pos.sum().backward()
    assert torch.isfinite(q.grad).all()


def test_root_guess_recovers_pose(rng):
    ro = rng.normal(0, 0.5, (3, 3))
    rt = rng.normal(size=(3, 3))
    ids = JointPairMap.identity(CHAIN).robot
    tg = chain_fk(CHAIN, np.zeros((3, CHAIN.dof)), ro, rt)
    gr, gt = root_guess(CHAIN, tg, ids)
    assert np.allclose(gr, ro, atol=1e-9) and np.allclose(gt, rt, atol=1e-12)


def test_limits_helpers():
    lo, hi = CHAIN.limits.T
    assert CHAIN.within_limits(lo) and CHAIN.within_limits(hi)
    assert not CHAIN.within_limits(hi + 1e-6)
    assert CHAIN.within_limits(CHAIN.clamp(hi + 5.0))


def test_round_trip_recovers_angles(rng):
    n = 6
    q = random_q(rng)
    Q = np.repeat(q[None], n, 0)
    R = np.repeat([[0.0, 0.0, 0.4]], n, 0)
    T = np.repeat([[0.2, 0.1, 0.98]], n, 0)
    tg = chain_fk(CHAIN, Q, R, T)
    tr = retarget_positions(tg, CHAIN, JointPairMap.identity(CHAIN).robot)
    assert np.abs(tr.q - Q).max() < 1e-3
    assert CHAIN.within_limits(tr.q)


def test_targets_beyond_limits_stay_clamped(rng):
    n = 4
    q = np.repeat(CHAIN.limits[:, 1][None] + 0.3, n, 0)      # reachable only past the upper limits
    tg = chain_fk(CHAIN, q, np.zeros((n, 3)), np.tile([0, 0, 1.0], (n, 1)))
    tr = retarget_positions(tg, CHAIN, JointPairMap.identity(CHAIN).robot, OptimConfig(0.01, 200))
    assert CHAIN.within_limits(tr.q)


def test_retarget_humanoid_from_human(carry):
    pairs = JointPairMap.default(CHAIN)
    tr, res = retarget_humanoid(carry.agents[0][:8], carry.bodies[0], CHAIN, pairs, OptimConfig(0.01, 300),
                                return_result=True)
    assert len(tr) == 8 and CHAIN.within_limits(tr.q)
    assert res.trace[-1] < res.trace[0]
    with pytest.raises(ValueError):
        retarget_humanoid(carry.agents[0][:1], carry.bodies[0], CHAIN, pairs)


def test_pair_residual_zero_at_truth(rng):
    q = random_q(rng, (3,))
    ro, rt = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    ids = JointPairMap.identity(CHAIN).robot
    tr = HumanoidTrajectory(q, ro, rt)
    assert np.allclose(pair_residual(tr, CHAIN, chain_fk(CHAIN, q, ro, rt), ids), 0, atol=1e-24)


def test_trajectory_io(tmp_path, rng):
    tr = HumanoidTrajectory(random_q(rng, (3,)), rng.normal(size=(3, 3)), rng.normal(size=(3, 3)),
                            joint_names=CHAIN.joint_names)
    tr.write(tmp_path / "h.h4d.json")
    back = HumanoidTrajectory.read(tmp_path / "h.h4d.json")
    assert np.array_equal(back.q, tr.q) and back.joint_names == tr.joint_names
    d = json.loads((tmp_path / "h.h4d.json").read_text())
    d["schema_version"] = "x"
    (tmp_path / "v.json").write_text(json.dumps(d))
    with pytest.raises(SchemaVersionMismatch):
        HumanoidTrajectory.read(tmp_path / "v.json")
    (tmp_path / "j.json").write_text("{")
    with pytest.raises(ParseError):
        HumanoidTrajectory.read(tmp_path / "j.json")


def test_optim_defaults():
    assert HUMANOID_OPTIM.learning_rate == 0.01
