"""Simplified 22-joint articulated body: kinematic tree, FK, fingertips and capsules.

Frame convention: x forward, y left, z up. Each bone hangs off its parent's
global frame along a fixed rest direction scaled by the bone length, and the
joint's axis-angle rotates everything below it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np
import torch

from . import _kernels
from .errors import ParseError
from .rotations import canonical_aa

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
)
PARENTS = np.array([-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19])
N_JOINTS = 22
BONE_NAMES = JOINT_NAMES[1:]
JOINT_INDEX = {n: i for i, n in enumerate(JOINT_NAMES)}
ARM_JOINTS = tuple(JOINT_INDEX[n] for n in (
    "left_collar", "right_collar", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist"))
NON_ARM_JOINTS = tuple(j for j in range(N_JOINTS) if j not in ARM_JOINTS)
WRISTS = (JOINT_INDEX["left_wrist"], JOINT_INDEX["right_wrist"])
MIRROR = {n: n.replace("left_", "right_") for n in BONE_NAMES if n.startswith("left_")}


def _load_json(name):
    return json.loads(resources.files("collab_retarget.data").joinpath(name).read_text())


def rest_directions():
    """Unit rest directions per bone (21, 3) from the shipped rest-pose table."""
    table = _load_json("rest_pose.json")
    names = [j["name"] for j in table["joints"]]
    if tuple(names) != JOINT_NAMES:
        raise ParseError("rest pose joint order does not match the skeleton", field="joints")
    d = np.array([j["direction"] for j in table["joints"][1:]], dtype=float)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


_REST_DIRS = rest_directions()


@dataclass(frozen=True)
class ArticulatedBody:
    bone_lengths: np.ndarray      # (21,)
    capsule_radii: np.ndarray     # (21,)
    fingertip_offsets: np.ndarray  # (2, 5, 3) in left / right wrist frames

    def __post_init__(self):
        bl = np.array(self.bone_lengths, dtype=float).reshape(21)
        cr = np.array(self.capsule_radii, dtype=float).reshape(21)
        ft = np.array(self.fingertip_offsets, dtype=float).reshape(2, 5, 3)
        if not ((bl > 0.01) & (bl < 1.0)).all():
            raise ValueError("bone lengths must lie in (0.01, 1.0) m")
        if not ((cr > 0.01) & (cr < 0.2)).all():
            raise ValueError("capsule radii must lie in (0.01, 0.2) m")
        for name, arr in (("bone_lengths", bl), ("capsule_radii", cr), ("fingertip_offsets", ft)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def default(cls):
        return cls.from_dict(_load_json("default_body.json"))

    @classmethod
    def from_dict(cls, d):
        try:
            bl = [float(d["bone_lengths"][n]) for n in BONE_NAMES]
            cr = [float(d["capsule_radii"][n]) for n in BONE_NAMES]
            ft = d["fingertip_offsets"]
        except KeyError as e:
            raise ParseError(f"missing body field {e}", field=str(e.args[0])) from None
        return cls(np.array(bl), np.array(cr), np.array(ft, dtype=float))

    def to_dict(self):
        return {
            "bone_lengths": dict(zip(BONE_NAMES, self.bone_lengths.tolist())),
            "capsule_radii": dict(zip(BONE_NAMES, self.capsule_radii.tolist())),
            "fingertip_offsets": self.fingertip_offsets.tolist(),
        }

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def write(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    def scaled(self, s):
        return ArticulatedBody(self.bone_lengths * s, self.capsule_radii, self.fingertip_offsets * s)

    @property
    def offsets(self):
        """Per-joint offset from the parent in the parent's frame (22, 3); root row is zero."""
        off = np.zeros((N_JOINTS, 3))
        off[1:] = _REST_DIRS * self.bone_lengths[:, None]
        return off

    def is_symmetric(self, tol=1e-12):
        idx = JOINT_INDEX
        return all(abs(self.bone_lengths[idx[l] - 1] - self.bone_lengths[idx[r] - 1]) <= tol
                   for l, r in MIRROR.items())

    def rest_joints(self):
        """Joint positions at the zero pose with the root at the origin."""
        return forward_kinematics(self, Pose.zero())[0]


@dataclass(frozen=True)
class Pose:
    """One frame, or a track when arrays carry a leading frame axis."""
    theta: np.ndarray        # (..., 21, 3)
    root_orient: np.ndarray  # (..., 3)
    root_transl: np.ndarray  # (..., 3)

    def __post_init__(self):
        th = np.array(self.theta, dtype=float)
        ro = np.array(self.root_orient, dtype=float)
        rt = np.array(self.root_transl, dtype=float)
        if th.shape[-2:] != (21, 3) or ro.shape[-1] != 3 or rt.shape[-1] != 3:
            raise ValueError("pose arrays must be (...,21,3), (...,3), (...,3)")
        if th.shape[:-2] != ro.shape[:-1] or ro.shape != rt.shape:
            raise ValueError("pose arrays disagree on leading shape")
        if not (np.isfinite(th).all() and np.isfinite(ro).all() and np.isfinite(rt).all()):
            raise ValueError("pose contains non-finite values")
        for name, arr in (("theta", th), ("root_orient", ro), ("root_transl", rt)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def zero(cls, frames=None):
        lead = () if frames is None else (frames,)
        return cls(np.zeros(lead + (21, 3)), np.zeros(lead + (3,)), np.zeros(lead + (3,)))

    @classmethod
    def stack(cls, poses):
        return cls(np.stack([p.theta for p in poses]), np.stack([p.root_orient for p in poses]),
                   np.stack([p.root_transl for p in poses]))

    def canonical(self):
        return Pose(canonical_aa(self.theta), canonical_aa(self.root_orient), self.root_transl)

    def __len__(self):
        return self.theta.shape[0] if self.theta.ndim == 3 else 1

    def __getitem__(self, i):
        return Pose(self.theta[i], self.root_orient[i], self.root_transl[i])

    def flat(self):
        """(..., 69) vector: theta, root orient, root translation."""
        lead = self.root_orient.shape[:-1]
        return np.concatenate([self.theta.reshape(lead + (63,)), self.root_orient, self.root_transl], -1)

    @classmethod
    def from_flat(cls, x):
        x = np.asarray(x, dtype=float)
        lead = x.shape[:-1]
        return cls(x[..., :63].reshape(lead + (21, 3)), x[..., 63:66], x[..., 66:69])

    def allclose(self, other, atol=0.0):
        return (np.allclose(self.theta, other.theta, rtol=0, atol=atol)
                and np.allclose(self.root_orient, other.root_orient, rtol=0, atol=atol)
                and np.allclose(self.root_transl, other.root_transl, rtol=0, atol=atol))


def _batched(arr, tail):
    arr = np.ascontiguousarray(arr, dtype=float)
    lead = arr.shape[: arr.ndim - len(tail)]
    return arr.reshape((-1,) + tail), lead


def forward_kinematics(body, pose):
    """Joint positions (...,22,3) and global joint frames (...,22,3,3)."""
    th, lead = _batched(pose.theta, (21, 3))
    ro, _ = _batched(pose.root_orient, (3,))
    rt, _ = _batched(pose.root_transl, (3,))
    off = np.ascontiguousarray(np.broadcast_to(body.offsets, (th.shape[0], N_JOINTS, 3)))
    pos, glob, _ = _kernels.fk_forward(th, ro, rt, PARENTS, off)
    return pos.reshape(lead + (N_JOINTS, 3)), glob.reshape(lead + (N_JOINTS, 3, 3))


def fingertips_from_frames(body, pos, glob):
    """Ten tips (left five then right five) from wrist positions and frames."""
    out = []
    for side, w in enumerate(WRISTS):
        out.append(pos[..., w, None, :] + np.einsum("...ij,kj->...ki", glob[..., w, :, :],
                                                    body.fingertip_offsets[side]))
    return np.concatenate(out, axis=-2)


def fingertip_positions(body, pose):
    pos, glob = forward_kinematics(body, pose)
    return fingertips_from_frames(body, pos, glob)


@dataclass(frozen=True)
class Capsules:
    a: np.ndarray       # (..., 21, 3) parent-joint end
    b: np.ndarray       # (..., 21, 3) child-joint end
    radius: np.ndarray  # (21,)

    def __len__(self):
        return self.a.shape[-2]


def surface_capsules(body, pose):
    pos, _ = forward_kinematics(body, pose)
    return Capsules(pos[..., PARENTS[1:], :], pos[..., 1:, :], np.asarray(body.capsule_radii))


def segment_distance(points, a, b):
    """Distance from points (M,3) to segments (K,3)-(K,3): returns (M,K)."""
    ab = b - a
    ap = points[:, None, :] - a[None]
    denom = np.maximum((ab * ab).sum(-1), 1e-300)
    t = np.clip((ap * ab[None]).sum(-1) / denom, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=-1)


def points_in_capsules(points, caps, chunk=4096):
    """Boolean mask over points: inside (distance < radius) any capsule of one frame."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    a = np.asarray(caps.a).reshape(-1, 3)
    b = np.asarray(caps.b).reshape(-1, 3)
    r = np.resize(np.asarray(caps.radius), len(a))
    inside = np.zeros(len(points), dtype=bool)
    for s in range(0, len(points), chunk):
        d = segment_distance(points[s:s + chunk], a, b)
        inside[s:s + chunk] = (d < r[None]).any(axis=1)
    return inside


# --- torch path -------------------------------------------------------------

class _FK(torch.autograd.Function):
    @staticmethod
    def forward(ctx, theta, orient, transl, offsets):
        th = theta.detach().contiguous().numpy()
        ro = orient.detach().contiguous().numpy()
        pos, glob, loc = _kernels.fk_forward(th, ro, transl.detach().contiguous().numpy(),
                                             PARENTS, offsets)
        ctx.saved = (th, ro, glob, loc, offsets)
        return torch.from_numpy(pos), torch.from_numpy(glob)

    @staticmethod
    def backward(ctx, g_pos, g_glob):
        th, ro, glob, loc, offsets = ctx.saved
        g_pos = np.zeros(glob.shape[:-1]) if g_pos is None else g_pos.contiguous().numpy()
        g_glob = np.zeros(glob.shape) if g_glob is None else g_glob.contiguous().numpy()
        d_th, d_ro, d_rt = _kernels.fk_backward(th, ro, glob, loc, PARENTS, offsets, g_pos, g_glob)
        return torch.from_numpy(d_th), torch.from_numpy(d_ro), torch.from_numpy(d_rt), None


class _FKTips(torch.autograd.Function):
    """Joint positions and fingertips only; skips building the global-frame tensor in torch."""

    @staticmethod
    def forward(ctx, theta, orient, transl, offsets, tip_offsets):
        th = theta.detach().contiguous().numpy()
        ro = orient.detach().contiguous().numpy()
        pos, glob, loc = _kernels.fk_forward(th, ro, transl.detach().contiguous().numpy(),
                                             PARENTS, offsets)
        w = list(WRISTS)
        tips = pos[:, w, None, :] + np.einsum("bsij,bskj->bski", glob[:, w], tip_offsets)
        ctx.saved = (th, ro, glob, loc, offsets, tip_offsets)
        return torch.from_numpy(pos), torch.from_numpy(tips.reshape(len(th), 10, 3))

    @staticmethod
    def backward(ctx, g_pos, g_tips):
        th, ro, glob, loc, offsets, tip_offsets = ctx.saved
        g_pos = np.zeros(glob.shape[:-1]) if g_pos is None else g_pos.numpy().copy()
        g_glob = np.zeros(glob.shape)
        if g_tips is not None:
            gt = g_tips.contiguous().numpy().reshape(len(th), 2, 5, 3)
            w = list(WRISTS)
            g_pos[:, w] += gt.sum(axis=2)
            g_glob[:, w] = np.einsum("bski,bskj->bsij", gt, tip_offsets)
        d_th, d_ro, d_rt = _kernels.fk_backward(th, ro, glob, loc, PARENTS, offsets, g_pos, g_glob)
        return torch.from_numpy(d_th), torch.from_numpy(d_ro), torch.from_numpy(d_rt), None, None


def body_offsets(bodies, batch):
    """Stack per-element offsets (batch, 22, 3); ``bodies`` is one body or one per element."""
    if isinstance(bodies, ArticulatedBody):
        return np.ascontiguousarray(np.broadcast_to(bodies.offsets, (batch, N_JOINTS, 3)))
    off = np.stack([b.offsets for b in bodies])
    return np.ascontiguousarray(off)


def fk_torch(theta, orient, transl, offsets):
    """Differentiable FK on float64 tensors with arbitrary leading dims.

    ``offsets`` is a numpy array broadcastable to (..., 22, 3).
    """
    lead = orient.shape[:-1]
    nb = int(np.prod(lead)) if lead else 1
    off = np.ascontiguousarray(np.broadcast_to(offsets, tuple(lead) + (N_JOINTS, 3)).reshape(nb, N_JOINTS, 3))
    pos, glob = _FK.apply(theta.reshape(nb, 21, 3), orient.reshape(nb, 3), transl.reshape(nb, 3), off)
    return pos.reshape(tuple(lead) + (N_JOINTS, 3)), glob.reshape(tuple(lead) + (N_JOINTS, 3, 3))


def fk_tips_torch(theta, orient, transl, offsets, tip_offsets):
    """Joint positions (..., 22, 3) and fingertips (..., 10, 3) in one differentiable call.

    ``offsets`` and ``tip_offsets`` are numpy arrays broadcastable to (..., 22, 3)
    and (..., 2, 5, 3).
    """
    lead = tuple(orient.shape[:-1])
    nb = int(np.prod(lead)) if lead else 1
    off = np.ascontiguousarray(np.broadcast_to(offsets, lead + (N_JOINTS, 3)).reshape(nb, N_JOINTS, 3))
    tip = np.ascontiguousarray(np.broadcast_to(tip_offsets, lead + (2, 5, 3)).reshape(nb, 2, 5, 3))
    pos, tips = _FKTips.apply(theta.reshape(nb, 21, 3), orient.reshape(nb, 3), transl.reshape(nb, 3), off, tip)
    return pos.reshape(lead + (N_JOINTS, 3)), tips.reshape(lead + (10, 3))


def fingertips_torch(tip_offsets, pos, glob):
    """tip_offsets: tensor broadcastable to (..., 2, 5, 3)."""
    tips = []
    for side, w in enumerate(WRISTS):
        local = tip_offsets[..., side, :, :]
        tips.append(pos[..., w, None, :] + torch.einsum("...ij,...kj->...ki", glob[..., w, :, :], local))
    return torch.cat(tips, dim=-2)
