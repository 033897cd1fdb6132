"""Kinematic retargeting of agent motion onto a revolute humanoid chain.

Paired joint positions are matched under a temporal smoothness term, with joint
limits enforced by clamping after every optimizer step.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np
import torch

from .body import JOINT_INDEX, forward_kinematics
from .diffopt import OptimConfig, minimize
from .errors import ParseError, SchemaVersionMismatch
from .rotations import aa_to_matrix_t, matrix_to_aa

H4D_VERSION = "core-retarget-humanoid/1"
HUMANOID_OPTIM = OptimConfig(learning_rate=0.01, iterations=1500)


@dataclass(frozen=True)
class HumanoidChain:
    """Revolute joints plus fixed end effectors, both hanging off a free-floating root."""
    name: str
    joint_names: tuple
    parents: np.ndarray      # (J,) index into keypoints; 0 is the root
    axes: np.ndarray         # (J, 3) unit
    offsets: np.ndarray      # (J, 3) in the parent frame
    limits: np.ndarray       # (J, 2)
    effector_names: tuple = ()
    effector_parents: np.ndarray = None
    effector_offsets: np.ndarray = None

    def __post_init__(self):
        n = len(self.joint_names)
        if not (len(self.parents) == len(self.axes) == len(self.offsets) == len(self.limits) == n):
            raise ValueError("joint arrays differ in length")
        for k, p in enumerate(self.parents):
            if not 0 <= p <= k:       # keypoint k + 1 may only hang off earlier keypoints
                raise ValueError(f"joint {self.joint_names[k]!r} is not in topological order")
        if not (self.limits[:, 0] < self.limits[:, 1]).all():
            raise ValueError("joint limits need lo < hi")

    @property
    def dof(self):
        return len(self.joint_names)

    @property
    def keypoint_names(self):
        return ("root",) + tuple(self.joint_names) + tuple(self.effector_names)

    def keypoint(self, name):
        try:
            return self.keypoint_names.index(name)
        except ValueError:
            raise ParseError(f"unknown humanoid keypoint {name!r}", field="pairs") from None

    @classmethod
    def from_dict(cls, d):
        try:
            names = [j["name"] for j in d["joints"]]
            index = {"root": 0, **{n: k + 1 for k, n in enumerate(names)}}
            parents = [index[j["parent"]] for j in d["joints"]]
            axes = np.array([j["axis"] for j in d["joints"]], dtype=float)
            axes /= np.linalg.norm(axes, axis=1, keepdims=True)
            offsets = np.array([j["offset"] for j in d["joints"]], dtype=float).reshape(-1, 3)
            limits = np.array([j["limits"] for j in d["joints"]], dtype=float).reshape(-1, 2)
            eff = d.get("end_effectors", [])
            e_names = tuple(e["name"] for e in eff)
            e_par = np.array([index[e["parent"]] for e in eff], dtype=int)
            e_off = np.array([e["offset"] for e in eff], dtype=float).reshape(-1, 3)
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"bad humanoid chain: {e}", field="joints") from None
        return cls(d.get("name", "humanoid"), tuple(names), np.array(parents, dtype=int), axes, offsets,
                   limits, e_names, e_par, e_off)

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def default(cls):
        text = resources.files("collab_retarget").joinpath("data/humanoid19.json").read_text()
        return cls.from_dict(json.loads(text))

    def clamp(self, q):
        return np.clip(q, self.limits[:, 0], self.limits[:, 1])

    def within_limits(self, q, tol=0.0):
        q = np.asarray(q)
        return bool(((q >= self.limits[:, 0] - tol) & (q <= self.limits[:, 1] + tol)).all())


@dataclass(frozen=True)
class JointPairMap:
    """(human joint id, humanoid keypoint id) pairs."""
    human: np.ndarray
    robot: np.ndarray

    def __post_init__(self):
        if len(self.human) != len(self.robot):
            raise ValueError("pair lists differ in length")
        if len(set(np.asarray(self.robot).tolist())) != len(self.robot):
            raise ValueError("a humanoid keypoint is targeted twice")

    def __len__(self):
        return len(self.human)

    @classmethod
    def from_names(cls, pairs, chain):
        try:
            human = [JOINT_INDEX[a] for a, _ in pairs]
        except KeyError as e:
            raise ParseError(f"unknown human joint {e.args[0]!r}", field="pairs") from None
        return cls(np.array(human, dtype=int), np.array([chain.keypoint(b) for _, b in pairs], dtype=int))

    @classmethod
    def default(cls, chain=None):
        chain = HumanoidChain.default() if chain is None else chain
        text = resources.files("collab_retarget").joinpath("data/humanoid19_pairs.json").read_text()
        return cls.from_names(json.loads(text)["pairs"], chain)

    @classmethod
    def identity(cls, chain):
        k = np.arange(len(chain.keypoint_names))
        return cls(k, k)


# ---------------------------------------------------------------- kinematics


def _axis_terms(chain, dtype):
    k = torch.zeros((chain.dof, 3, 3), dtype=dtype)
    ax = torch.as_tensor(chain.axes, dtype=dtype)
    k[:, 0, 1], k[:, 0, 2], k[:, 1, 2] = -ax[:, 2], ax[:, 1], -ax[:, 0]
    k = k - k.transpose(1, 2)
    return k, k @ k


def chain_fk_t(chain, q, root_orient, root_transl):
    """Keypoint positions (..., 1 + J + E, 3) for torch inputs."""
    k, k2 = _axis_terms(chain, q.dtype)
    # Rodrigues about fixed unit axes, all joints at once
    local = (torch.eye(3, dtype=q.dtype) + torch.sin(q)[..., None, None] * k
             + (1 - torch.cos(q))[..., None, None] * k2)
    pos, rot = [root_transl], [aa_to_matrix_t(root_orient)]
    off = torch.as_tensor(chain.offsets, dtype=q.dtype)
    for j in range(chain.dof):
        p = chain.parents[j]
        pos.append(pos[p] + rot[p] @ off[j])
        rot.append(rot[p] @ local[..., j, :, :])
    if chain.effector_names:
        e_off = torch.as_tensor(chain.effector_offsets, dtype=q.dtype)
        for j, p in enumerate(chain.effector_parents):
            pos.append(pos[p] + rot[p] @ e_off[j])
    return torch.stack(pos, dim=-2)


def chain_fk(chain, q, root_orient, root_transl):
    with torch.no_grad():
        return chain_fk_t(chain, torch.as_tensor(np.asarray(q, dtype=float)),
                          torch.as_tensor(np.asarray(root_orient, dtype=float)),
                          torch.as_tensor(np.asarray(root_transl, dtype=float))).numpy()


# ---------------------------------------------------------------- retargeting


@dataclass
class HumanoidTrajectory:
    q: np.ndarray             # (N, J)
    root_orient: np.ndarray   # (N, 3)
    root_transl: np.ndarray   # (N, 3)
    chain_name: str = "humanoid"
    joint_names: tuple = ()
    fps: float = 15.0

    def __len__(self):
        return len(self.q)

    def to_dict(self):
        return {
            "schema_version": H4D_VERSION,
            "chain": self.chain_name,
            "fps": self.fps,
            "joint_names": list(self.joint_names),
            "q": self.q.tolist(),
            "root_orient": self.root_orient.tolist(),
            "root_transl": self.root_transl.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != H4D_VERSION:
            raise SchemaVersionMismatch(f"expected {H4D_VERSION}, got {d.get('schema_version')!r}")
        try:
            return cls(np.array(d["q"], dtype=float), np.array(d["root_orient"], dtype=float),
                       np.array(d["root_transl"], dtype=float), d.get("chain", "humanoid"),
                       tuple(d.get("joint_names", ())), float(d.get("fps", 15.0)))
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"bad humanoid trajectory: {e}") from None

    def write(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON: {e.msg}", line=e.lineno) from None
        return cls.from_dict(d)


def root_guess(chain, targets, robot_ids):
    """Root translation and per-frame Kabsch rotation from the zero pose to the targets."""
    targets = np.asarray(targets, dtype=float)
    n = len(targets)
    zero = chain_fk(chain, np.zeros(chain.dof), np.zeros(3), np.zeros(3))[robot_ids]
    root_pos = np.where(robot_ids == 0)[0]
    transl = targets[:, root_pos[0]] if len(root_pos) else targets.mean(1) - zero.mean(0)
    a = zero - zero.mean(0)
    b = targets - targets.mean(1, keepdims=True)
    u, _, vt = np.linalg.svd(np.einsum("ki,nkj->nij", a, b))
    d = np.sign(np.linalg.det(np.einsum("nij,njk->nik", u, vt)))
    u[:, :, -1] *= d[:, None]
    rot = np.einsum("nij,njk->nki", u, vt)
    return matrix_to_aa(rot), np.broadcast_to(transl, (n, 3)).copy()


def humanoid_terms(x, chain, targets, robot_ids, w_p=1.0, w_t=1.0):
    j = chain.dof
    q, ro, rt = x[..., :j], x[..., j:j + 3], x[..., j + 3:j + 6]
    pos = chain_fk_t(chain, q, ro, rt)[..., list(robot_ids), :]
    l_p = ((pos - targets) ** 2).sum()
    l_t = ((x[1:] - x[:-1]) ** 2).sum() if len(x) > 1 else x.sum() * 0
    return {"pairs": w_p * l_p, "temporal": w_t * l_t}


def retarget_positions(targets, chain, robot_ids, cfg=HUMANOID_OPTIM, w_p=1.0, w_t=1.0, init=None,
                       return_result=False):
    """Fit a humanoid trajectory to per-frame target positions of keypoints ``robot_ids``."""
    targets = np.asarray(targets, dtype=float)
    robot_ids = np.asarray(robot_ids, dtype=int)
    j = chain.dof
    if init is None:
        ro, rt = root_guess(chain, targets, robot_ids)
        x0 = np.concatenate([np.zeros((len(targets), j)), ro, rt], axis=1)
    else:
        x0 = np.concatenate([init.q, init.root_orient, init.root_transl], axis=1)
    x0[:, :j] = chain.clamp(x0[:, :j])
    tg = torch.as_tensor(targets)
    lo = torch.as_tensor(chain.limits[:, 0])
    hi = torch.as_tensor(chain.limits[:, 1])

    def project(x):
        x[..., :j] = torch.maximum(torch.minimum(x[..., :j], hi), lo)

    def objective(x):
        terms = humanoid_terms(x, chain, tg, robot_ids, w_p, w_t)
        return sum(terms.values()), terms

    res = minimize(objective, x0, cfg, project=project)
    traj = HumanoidTrajectory(res.x[:, :j], res.x[:, j:j + 3], res.x[:, j + 3:], chain.name, chain.joint_names)
    return (traj, res) if return_result else traj


def retarget_humanoid(pose, body, chain=None, pairs=None, cfg=HUMANOID_OPTIM, w_p=1.0, w_t=1.0,
                      fps=15.0, return_result=False):
    """Humanoid trajectory whose paired keypoints follow the human's joints."""
    chain = HumanoidChain.default() if chain is None else chain
    pairs = JointPairMap.default(chain) if pairs is None else pairs
    if len(pose) < 2:
        raise ValueError("humanoid retargeting needs at least two frames")
    joints = forward_kinematics(body, pose)[0][:, pairs.human]
    out = retarget_positions(joints, chain, pairs.robot, cfg, w_p, w_t, return_result=return_result)
    traj = out[0] if return_result else out
    traj.fps = fps
    return out


def pair_residual(traj, chain, targets, robot_ids):
    """Per-frame sum of squared paired-keypoint distances."""
    pos = chain_fk(chain, traj.q, traj.root_orient, traj.root_transl)[:, robot_ids]
    return ((pos - targets) ** 2).sum(axis=(-1, -2))
