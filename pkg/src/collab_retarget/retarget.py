"""Contact-guided two-stage retargeting and the skeleton-fitting loss family.

Object stage: fit a new object track to the source track under L1 fidelity,
ground clearance and acceleration smoothness. Human stage: re-pose both agents
so their fingertips reach the transferred contact points in the object frame,
while bone directions of the arms and global positions of the remaining joints
stay close to the source.

All problems accept a leading batch axis; Adam is elementwise, so a batch of
independent problems is solved exactly as if each were run on its own.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .body import (ARM_JOINTS, JOINT_INDEX, N_JOINTS, NON_ARM_JOINTS, PARENTS, Pose,
                   fingertips_torch, fk_tips_torch, fk_torch, forward_kinematics)
from . import _kernels
from .diffopt import OptimConfig, minimize
from .errors import EmptyConstraint, LengthMismatch, TrackTooShort
from .motion import CONTACT_THRESHOLD, ObjectTrack
from .rotations import aa_to_matrix, aa_to_matrix_t, matrix_to_aa

OBJECT_OPTIM = OptimConfig(learning_rate=0.01, iterations=1000)
HUMAN_OPTIM = OptimConfig(learning_rate=0.01, iterations=1500)
FIT_OPTIM = OptimConfig(learning_rate=0.01, iterations=1000)
HEIGHT_SAMPLES = 500

ORI_JOINTS = tuple(JOINT_INDEX[n] for n in (
    "head", "spine1", "spine2", "left_hip", "right_hip", "left_collar",
    "right_collar", "left_shoulder", "right_shoulder", "neck"))


@dataclass(frozen=True)
class LossWeights:
    f_rot: float = 500.0
    f_trans: float = 0.005
    spat_object: float = 0.01
    smooth_object: float = 1.0
    sr: float = 0.1
    wr: float = 0.003
    c: float = 1000.0
    spat_human: float = 0.01
    smooth_human: float = 1.0

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"weight {k} must be >= 0")


@dataclass(frozen=True)
class FitWeights:
    body: float = 1e-3
    hand: float = 1e-4
    j3d: float = 1.0
    h3d: float = 2.0
    ori: float = 0.2
    smooth_fit: float = 20.0
    contact: float = 2.0

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"weight {k} must be >= 0")


# ---------------------------------------------------------------- loss terms


def acceleration(x):
    """Second difference 2 x_i - x_{i-1} - x_{i+1} along the frame axis (-2)."""
    return 2 * x[..., 1:-1, :] - x[..., :-2, :] - x[..., 2:, :]


def smooth_loss(*tracks):
    """Sum of squared accelerations; tracks are (..., N, D)."""
    return sum((acceleration(t) ** 2).sum(dim=(-1, -2)) for t in tracks)


def velocity_loss(x):
    return ((x[..., 1:, :] - x[..., :-1, :]) ** 2).sum(dim=(-1, -2))


def fidelity_l1(x, ref):
    return (x - ref).abs().sum(dim=(-1, -2))


def ground_penalty(heights):
    """Sum over frames of max(-min height, 0); heights (..., N, M)."""
    return torch.relu(-heights.min(dim=-1).values).sum(dim=-1)


def object_heights(rot_aa, transl, verts):
    """World z of object-frame vertices (M,3) under per-frame poses: (..., N, M)."""
    r = aa_to_matrix_t(rot_aa)
    return torch.einsum("...k,mk->...m", r[..., 2, :], verts) + transl[..., 2:3]


def chamfer(tips, points, point_mask):
    """Per-hand squared Chamfer distance with means in both directions.

    tips (..., T, 3); points (..., K, 3) with validity mask (..., K).
    Nearest-neighbour choices follow ``min`` and therefore are fixed at the
    evaluation point: the gradient is the one of the selected pairs.
    """
    d2 = ((tips[..., :, None, :] - points[..., None, :, :]) ** 2).sum(-1)
    big = torch.finfo(d2.dtype).max / 4
    valid = point_mask[..., None, :]
    fwd = torch.where(valid, d2, big).min(dim=-1).values.mean(dim=-1)
    bwd_each = d2.min(dim=-2).values
    count = point_mask.sum(-1).clamp(min=1)
    bwd = torch.where(point_mask, bwd_each, 0.0).sum(-1) / count
    has = point_mask.any(-1)
    return torch.where(has, fwd + bwd, 0.0)


class _Chamfer(torch.autograd.Function):
    @staticmethod
    def forward(ctx, tips, points, mask):
        val, grad = _kernels.chamfer_forward(tips.detach().contiguous().numpy(), points, mask)
        ctx.grad = grad
        return torch.from_numpy(val)

    @staticmethod
    def backward(ctx, g):
        return torch.from_numpy(ctx.grad) * g[..., None, None], None, None


def chamfer_frames(tips, points, point_mask):
    """``chamfer`` for tips (B, N, H, T, 3) against per-problem points (B, H, K, 3) shared by all frames.

    Compiled forward and gradient; values and gradients match ``chamfer``.
    """
    return _Chamfer.apply(tips, np.ascontiguousarray(points, dtype=float),
                         np.ascontiguousarray(point_mask, dtype=bool))


# ---------------------------------------------------------------- object stage


def height_samples(mesh, count=HEIGHT_SAMPLES):
    """Evenly strided vertex subsample for the ground-clearance term."""
    v = np.asarray(mesh.vertices)
    if len(v) <= count:
        return v.copy()
    idx = np.linspace(0, len(v) - 1, count).round().astype(int)
    return v[idx]


def object_objective(verts, w):
    """Clearance and smoothness; the L1 fidelity goes to the optimizer as an anchor."""
    vv = torch.as_tensor(verts)

    def objective(x):
        r, t = x[..., :3], x[..., 3:]
        terms = {
            "spatial": w.spat_object * ground_penalty(object_heights(r, t, vv)),
            "smooth": w.smooth_object * smooth_loss(r, t),
        }
        return sum(terms.values()), terms
    return objective


def object_loss(x, source_x, verts, w):
    """Full object-stage loss per problem (fidelity included), for checks and reports."""
    x = torch.as_tensor(x)
    ref = torch.as_tensor(source_x)
    total, terms = object_objective(verts, w)(x)
    rot = w.f_rot * fidelity_l1(x[..., :3], ref[..., :3])
    tr = w.f_trans * fidelity_l1(x[..., 3:], ref[..., 3:])
    return total + rot + tr, dict(terms, fidelity_rot=rot, fidelity_trans=tr)


def fidelity_weights(w, shape):
    lam = np.empty(shape)
    lam[..., :3] = w.f_rot
    lam[..., 3:] = w.f_trans
    return lam


def retarget_object_motion(source, target_sdf, target_mesh, w=LossWeights(), cfg=OBJECT_OPTIM,
                           return_result=False):
    """Fit the target's object track, starting from the source track.

    ``source`` may be one ObjectTrack or a list solved together as a batch.
    ``target_sdf`` is accepted for interface symmetry; clearance uses mesh vertices.
    """
    tracks = [source] if isinstance(source, ObjectTrack) else list(source)
    n = len(tracks[0])
    if n < 3:
        raise TrackTooShort("object retargeting needs at least 3 frames")
    if any(len(t) != n for t in tracks):
        raise LengthMismatch("batched object tracks must share a length")
    src_r = np.stack([t.rotations for t in tracks])
    src_t = np.stack([t.translations for t in tracks])
    x0 = np.concatenate([src_r, src_t], axis=-1)
    res = minimize(object_objective(height_samples(target_mesh), w), x0, cfg, keep_best=True,
                   anchor=(x0, fidelity_weights(w, x0.shape)))
    out = [ObjectTrack(x[:, :3], x[:, 3:]) for x in res.x]
    out = out[0] if isinstance(source, ObjectTrack) else out
    return (out, res) if return_result else out


# ---------------------------------------------------------------- human stage


def _pad_constraints(constraints):
    """List of ContactConstraint -> points (B,4,K,3), mask (B,4,K)."""
    k = max(1, max(len(h) for c in constraints for h in c.hands))
    pts = np.zeros((len(constraints), 4, k, 3))
    mask = np.zeros((len(constraints), 4, k), dtype=bool)
    for b, c in enumerate(constraints):
        for h, p in enumerate(c.hands):
            pts[b, h, :len(p)] = p
            mask[b, h, :len(p)] = True
    return pts, mask


def _flat_pose(p):
    n = len(p)
    return np.concatenate([p.theta.reshape(n, 63), p.root_orient, p.root_transl], axis=-1)


def _unflat(x):
    return x[..., :63].reshape(x.shape[:-1] + (21, 3)), x[..., 63:66], x[..., 66:69]


@dataclass
class HumanProblem:
    """Precomputed tensors for a batch of human-stage problems on one source."""
    source_joints: torch.Tensor   # (2, N, 22, 3)
    offsets: np.ndarray           # (2, 1, 22, 3)
    tip_offsets: np.ndarray       # (2, 1, 2, 5, 3)
    obj_rot: torch.Tensor         # (B, N, 3, 3)
    obj_t: torch.Tensor           # (B, N, 3)
    points: np.ndarray            # (B, 4, K, 3)
    point_mask: np.ndarray        # (B, 4, K)
    frame_mask: torch.Tensor      # (B, N, 4)


_ARM = torch.tensor(ARM_JOINTS)
_ARM_PARENTS = torch.tensor(PARENTS[list(ARM_JOINTS)])
_NON_ARM = torch.tensor(NON_ARM_JOINTS)


def human_terms(x, prob, w):
    """All human-stage terms for parameters x (B, 2, N, 69); each (B,)."""
    theta, orient, transl = _unflat(x)
    pos, tips = fk_tips_torch(theta, orient, transl, prob.offsets[None], prob.tip_offsets[None])  # tips (B,2,N,10,3)
    src = prob.source_joints
    vec = pos[..., _ARM_PARENTS, :] - pos[..., _ARM, :]
    vec_src = src[..., _ARM_PARENTS, :] - src[..., _ARM, :]
    l_sr = ((vec - vec_src) ** 2).sum(dim=(-1, -2, -3, -4))
    l_wr = ((pos[..., _NON_ARM, :] - src[..., _NON_ARM, :]) ** 2).sum(dim=(-1, -2, -3, -4))
    rel = tips - prob.obj_t[:, None, :, None, :]
    local = torch.einsum("bnji,bancj->bnaci", prob.obj_rot, rel)             # (B,N,2,10,3)
    hands = local.reshape(local.shape[0], local.shape[1], 4, 5, 3)
    cd = chamfer_frames(hands, prob.points, prob.point_mask)                  # (B,N,4)
    l_c = (cd * prob.frame_mask).sum(dim=(-1, -2))
    l_spat = ground_penalty(pos[..., 2]).sum(-1)
    l_smooth = smooth_loss(x).sum(-1)
    return {
        "sr": w.sr * l_sr,
        "wr": w.wr * l_wr,
        "contact": w.c * l_c,
        "spatial": w.spat_human * l_spat,
        "smooth": w.smooth_human * l_smooth,
    }


def build_human_problem(source, target_tracks, constraints, frame_masks, bodies=None):
    bodies = source.bodies if bodies is None else bodies
    n = len(source)
    for t in target_tracks:
        if len(t) != n:
            raise LengthMismatch("target object track length differs from the source")
    src_joints = np.stack([forward_kinematics(b, a)[0] for b, a in zip(bodies, source.agents)])
    pts, pmask = _pad_constraints(constraints)
    fm = np.broadcast_to(np.asarray(frame_masks, dtype=bool), (len(constraints), n, 4)).copy()
    fm &= pmask.any(-1)[:, None, :]
    if not fm.any(axis=(1, 2)).all():
        raise EmptyConstraint("no hand has both contact points and an active contact frame")
    return HumanProblem(
        source_joints=torch.as_tensor(src_joints),
        offsets=np.stack([b.offsets for b in bodies])[:, None],
        tip_offsets=np.stack([b.fingertip_offsets for b in bodies])[:, None],
        obj_rot=torch.as_tensor(np.stack([t.matrices() for t in target_tracks])),
        obj_t=torch.as_tensor(np.stack([t.translations for t in target_tracks])),
        points=pts,
        point_mask=pmask,
        frame_mask=torch.as_tensor(fm.astype(float)),
    )


def retarget_human_motion(source, target_track, constraint, contact_frames, bodies=None,
                          w=LossWeights(), cfg=HUMAN_OPTIM, return_result=False):
    """Re-pose both agents of ``source`` for a target object track and contact constraint.

    ``target_track``/``constraint`` may be lists (one problem per element, solved as
    a batch); ``contact_frames`` is (N, 4) or (B, N, 4) booleans. Returns a pair of
    Pose tracks, or a list of pairs for batched input.
    """
    batched = isinstance(constraint, (list, tuple))
    tracks = list(target_track) if batched else [target_track]
    cons = list(constraint) if batched else [constraint]
    if len(tracks) != len(cons):
        raise LengthMismatch("one target track per constraint is required")
    prob = build_human_problem(source, tracks, cons, contact_frames, bodies)
    x0 = np.stack([_flat_pose(a) for a in source.agents])
    x0 = np.broadcast_to(x0, (len(cons),) + x0.shape).copy()

    def objective(x):
        terms = human_terms(x, prob, w)
        return sum(terms.values()), terms

    res = minimize(objective, x0, cfg)
    outs = []
    for xb in res.x:
        outs.append(tuple(Pose(*_unflat(xb[k])).canonical() for k in range(2)))
    out = outs if batched else outs[0]
    return (out, res) if return_result else out


def contact_chamfer(tips_local, constraint, frame_mask):
    """Per-frame, per-hand squared Chamfer (numpy) used for reporting: (N, 4)."""
    pts, pmask = _pad_constraints([constraint])
    hands = torch.as_tensor(np.asarray(tips_local).reshape(len(tips_local), 4, 5, 3))
    cd = chamfer(hands, torch.as_tensor(pts)[0][None], torch.as_tensor(pmask)[0][None]).numpy()
    return np.where(frame_mask & pmask[0].any(-1)[None], cd, np.nan)


def tip_to_constraint_distance(tips_local, constraint):
    """Distance from each tip to its hand's nearest constraint point: (N, 4, 5); nan if empty."""
    tl = np.asarray(tips_local).reshape(len(tips_local), 4, 5, 3)
    out = np.full(tl.shape[:-1], np.nan)
    for h, p in enumerate(constraint.hands):
        if len(p):
            d = np.linalg.norm(tl[:, h, :, None, :] - p[None, None], axis=-1)
            out[:, h] = d.min(-1)
    return out


# ---------------------------------------------------------------- fitting


@dataclass
class FitTargets:
    joints: np.ndarray                  # (N, 22, 3)
    orientations: np.ndarray = None     # (N, 10, 3, 3) global frames of ORI_JOINTS
    fingertips: np.ndarray = None       # (N, 10, 3)
    wrist_orientations: np.ndarray = None  # (N, 2, 3, 3)
    object_points: np.ndarray = None    # (N, M, 3) world object surface samples


def fit_terms(x, tg, offsets, tip_offsets, w):
    theta, orient, transl = _unflat(x)
    pos, glob = fk_torch(theta, orient, transl, offsets)
    terms = {
        "reg": w.body * (theta ** 2).sum(dim=(-1, -2, -3)),
        "j3d": w.j3d * ((pos - tg["joints"]) ** 2).sum(dim=(-1, -2, -3)),
    }
    zero = torch.zeros_like(terms["reg"])
    terms["ori"] = (w.ori * ((glob[..., list(ORI_JOINTS), :, :] - tg["ori"]) ** 2).sum(dim=(-1, -2, -3, -4))
                    if "ori" in tg else zero)
    tips = fingertips_torch(tip_offsets, pos, glob)
    terms["h3d"] = w.h3d * ((tips - tg["tips"]) ** 2).sum(dim=(-1, -2, -3)) if "tips" in tg else zero
    terms["hori"] = (w.ori * ((glob[..., [20, 21], :, :] - tg["wori"]) ** 2).sum(dim=(-1, -2, -3, -4))
                     if "wori" in tg else zero)
    terms["smooth"] = w.smooth_fit * velocity_loss(theta.reshape(theta.shape[:-2] + (63,)))
    if "obj" in tg:
        d2 = ((tips[..., :, None, :] - tg["obj"][..., None, :, :]) ** 2).sum(-1).min(dim=-1).values
        gate = (d2.detach() < CONTACT_THRESHOLD ** 2).to(d2.dtype)
        terms["contact"] = w.contact * (gate * d2).sum(dim=(-1, -2))
    else:
        terms["contact"] = zero
    return terms


def fit_pose_sequence(targets, body, w=FitWeights(), cfg=FIT_OPTIM, init=None, return_result=False):
    """Fit a pose track to joint, orientation, fingertip and contact targets."""
    j = np.asarray(targets.joints, dtype=float)
    n = len(j)
    tg = {"joints": torch.as_tensor(j)}
    if targets.orientations is not None:
        tg["ori"] = torch.as_tensor(np.asarray(targets.orientations, dtype=float))
    if targets.fingertips is not None:
        tg["tips"] = torch.as_tensor(np.asarray(targets.fingertips, dtype=float))
    if targets.wrist_orientations is not None:
        tg["wori"] = torch.as_tensor(np.asarray(targets.wrist_orientations, dtype=float))
    if targets.object_points is not None:
        tg["obj"] = torch.as_tensor(np.asarray(targets.object_points, dtype=float))
    tip_off = torch.tensor(body.fingertip_offsets)
    if init is None:
        x0 = np.zeros((n, 69))
        x0[:, 63:66] = root_orientation_guess(body, j)
        x0[:, 66:] = j[:, 0]
    else:
        x0 = _flat_pose(init)

    def objective(x):
        terms = fit_terms(x, tg, body.offsets, tip_off, w)
        return sum(terms.values()), terms

    res = minimize(objective, x0, cfg)
    pose = Pose(*_unflat(res.x)).canonical()
    return (pose, res) if return_result else pose


def root_orientation_guess(body, joints):
    """Per-frame rotation best aligning the rest pelvis children with the targets (Kabsch)."""
    rest = body.rest_joints()
    kids = [k for k in range(N_JOINTS) if PARENTS[k] == 0]
    a = rest[kids] - rest[0]                                   # (3, 3)
    b = joints[:, kids] - joints[:, :1]                        # (N, 3, 3)
    u, _, vt = np.linalg.svd(np.einsum("ki,nkj->nij", a, b))
    d = np.sign(np.linalg.det(np.einsum("nij,njk->nik", u, vt)))
    u[:, :, -1] *= d[:, None]
    rot = np.einsum("nij,njk->nki", u, vt)                     # maps rest offsets onto targets
    return matrix_to_aa(rot)


def orientation_targets(body, pose):
    """Global frames of the orientation-supervised joints, from FK: (N, 10, 3, 3)."""
    _, glob = forward_kinematics(body, pose)
    return glob[..., list(ORI_JOINTS), :, :]

