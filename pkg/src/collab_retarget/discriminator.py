"""Pose ranking discriminator: negative synthesis, margin-ranking training, scoring.

A pose is scored from its root-canonical joint positions: FK with the root at the
origin and unrotated, pelvis dropped, 21 x 3 values. Any rigid motion of the root
leaves the input, and so the score, unchanged.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .body import JOINT_INDEX, Pose, forward_kinematics
from .errors import NonFiniteLoss, ParseError
from .motion import ObjectTrack
from .rotations import aa_to_matrix, matrix_to_aa
from .retarget import HUMAN_OPTIM, LossWeights, retarget_human_motion

MODEL_MAGIC = b"RNK1"
LAYERS = (63, 256, 256, 1)
TRAIN_LR = 2e-4
TRAIN_EPOCHS = 1000
ACTIVATIONS = ("tanh", "silu", "softplus")


@dataclass(frozen=True)
class NoiseSpec:
    """Ranges for the magnitude of each 6D object-pose noise component."""
    rot_range: tuple = (20.0, 60.0)     # degrees
    trans_range: tuple = (0.2, 0.5)     # metres

    def __post_init__(self):
        for name in ("rot_range", "trans_range"):
            lo, hi = getattr(self, name)
            # lo == hi == 0 is accepted so tests can switch the noise off
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi, got {(lo, hi)}")

    def sample(self, rng, size=None):
        """Deltas (alpha, beta, gamma in degrees, x, y, z in metres), random signs."""
        shape = (3,) if size is None else (size, 3)
        rot = rng.uniform(*self.rot_range, size=shape) * rng.choice([-1.0, 1.0], size=shape)
        tr = rng.uniform(*self.trans_range, size=shape) * rng.choice([-1.0, 1.0], size=shape)
        return np.concatenate([rot, tr], axis=-1)


def margin(delta):
    """(|a| + |b| + |c|) / 10 + (|x| + |y| + |z|) * 10, angles in degrees and offsets in metres."""
    d = np.abs(np.asarray(delta, dtype=float))
    return d[..., :3].sum(-1) / 10.0 + d[..., 3:].sum(-1) * 10.0


def delta_rotation(delta):
    """Rotation of the angular part, applied as successive x, y, z turns."""
    a = np.deg2rad(np.asarray(delta, dtype=float)[..., :3])
    rx = aa_to_matrix(a[..., 0:1] * np.array([1.0, 0, 0]))
    ry = aa_to_matrix(a[..., 1:2] * np.array([0, 1.0, 0]))
    rz = aa_to_matrix(a[..., 2:3] * np.array([0, 0, 1.0]))
    return rz @ ry @ rx


def perturb_track(track, delta):
    """Object track rotated about its own origin by the delta rotation and shifted."""
    r = delta_rotation(delta)
    rot = matrix_to_aa(r[None] @ track.matrices())
    return ObjectTrack(rot, track.translations + np.asarray(delta, dtype=float)[3:])


def make_negative(seq, constraint, masks, noise=NoiseSpec(), seed=0, w=LossWeights(), cfg=HUMAN_OPTIM):
    """Perturb the object track by a sampled delta and re-pose the agents with the original contacts.

    ``constraint`` holds the source's own contact points (object frame) and ``masks``
    its per-frame, per-hand contact flags. Returns ((agent1, agent2), delta).
    """
    negs, deltas = make_negatives(seq, constraint, masks, noise, [seed], w, cfg)
    return negs[0], deltas[0]


def make_negatives(seq, constraint, masks, noise=NoiseSpec(), seeds=(0,), w=LossWeights(), cfg=HUMAN_OPTIM):
    """Batched ``make_negative``: one delta per seed, all retargeted together."""
    deltas = [noise.sample(np.random.default_rng(s)) for s in seeds]
    tracks = [perturb_track(seq.object, d) for d in deltas]
    out = retarget_human_motion(seq, tracks, [constraint] * len(tracks), masks, w=w, cfg=cfg)
    return out, deltas


# ---------------------------------------------------------------- features


def pose_features(body, pose):
    """Root-canonical joint positions, (..., 63)."""
    theta = np.asarray(pose.theta, dtype=float)
    zero = np.zeros(theta.shape[:-2] + (3,))
    pos, _ = forward_kinematics(body, Pose(theta, zero, zero))
    return pos[..., 1:, :].reshape(pos.shape[:-2] + (63,))


def sequence_features(seq):
    """(2, N, 63) features for both agents of a motion sequence."""
    return np.stack([pose_features(b, a) for b, a in zip(seq.bodies, seq.agents)])


# ---------------------------------------------------------------- model


class RankingModel(nn.Module):
    def __init__(self, layers=LAYERS, activation="silu"):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layers = tuple(int(n) for n in layers)
        self.activation = activation
        self.linears = nn.ModuleList(nn.Linear(a, b) for a, b in zip(self.layers[:-1], self.layers[1:]))
        self.act = {"tanh": nn.Tanh(), "silu": nn.SiLU(), "softplus": nn.Softplus()}[activation]

    def forward(self, x):
        for lin in self.linears[:-1]:
            x = self.act(lin(x))
        return self.linears[-1](x)[..., 0]

    @torch.no_grad()
    def score_features(self, feats):
        x = torch.as_tensor(np.asarray(feats), dtype=torch.float32)
        return self(x).double().numpy()


def ranking_loss(r_pos, r_neg, m):
    """-log sigmoid(R_pos - R_neg - m), elementwise."""
    return nn.functional.softplus(-(r_pos - r_neg - m))


@dataclass
class TrainResult:
    model: RankingModel
    trace: np.ndarray          # mean training loss per epoch


def train(pos_feats, neg_feats, deltas, lr=TRAIN_LR, epochs=TRAIN_EPOCHS, batch_size=512, seed=0,
          layers=LAYERS, activation="silu", log=None):
    """Fit a RankingModel on pairs of (positive, negative) features with their noise deltas."""
    pos = torch.as_tensor(np.asarray(pos_feats), dtype=torch.float32)
    neg = torch.as_tensor(np.asarray(neg_feats), dtype=torch.float32)
    m = torch.as_tensor(margin(deltas), dtype=torch.float32)
    if len(pos) < 100:
        raise ValueError("training needs at least 100 pairs")
    if not (len(pos) == len(neg) == len(m)):
        raise ValueError("pair arrays differ in length")
    torch.manual_seed(seed)
    model = RankingModel(layers, activation)
    opt = torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)
    gen = torch.Generator().manual_seed(seed)
    trace = np.zeros(epochs)
    # once pairs are separated the loss underflows; denormal arithmetic is very slow on CPU.
    # The flag is process-wide FPU state, so it is switched back off afterwards.
    torch.set_flush_denormal(True)
    try:
        for ep in range(epochs):
            order = torch.randperm(len(pos), generator=gen)
            total = 0.0
            for s in range(0, len(pos), batch_size):
                idx = order[s:s + batch_size]
                loss = ranking_loss(model(pos[idx]), model(neg[idx]), m[idx]).mean()
                if not torch.isfinite(loss):
                    raise NonFiniteLoss(ep, float(loss))
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            trace[ep] = total / len(pos)
            if log is not None and (ep % 100 == 0 or ep == epochs - 1):
                log(ep, trace[ep])
    finally:
        torch.set_flush_denormal(False)
    model.eval()
    return TrainResult(model, trace)


def pair_loss(model, pos_feats, neg_feats, deltas):
    """Mean ranking loss over pairs, evaluated in float64 from the model's scores."""
    rp = torch.as_tensor(model.score_features(pos_feats))
    rn = torch.as_tensor(model.score_features(neg_feats))
    return float(ranking_loss(rp, rn, torch.as_tensor(margin(deltas))).mean())


def ranking_accuracy(model, pos_feats, neg_feats):
    return float(np.mean(model.score_features(pos_feats) > model.score_features(neg_feats)))


def score(model, body, pose):
    """Per-frame scores of a pose (or pose track)."""
    return model.score_features(pose_features(body, pose))


def score_sequence(model, seq):
    """Mean frame score over both agents."""
    return float(model.score_features(sequence_features(seq)).mean())


# ---------------------------------------------------------------- synthetic pairs

_SHOULDERS = (JOINT_INDEX["left_shoulder"], JOINT_INDEX["right_shoulder"])
_ELBOWS = (JOINT_INDEX["left_elbow"], JOINT_INDEX["right_elbow"])
ELBOW_GAIN = 2.0   # rad of extra elbow flexion per metre of translation noise


def displace_pose(theta, delta):
    """Pose-space stand-in for object noise.

    With the hands tied to the object, a rotated and shifted object drags the arms:
    both shoulders turn by the delta rotation and the elbows flex by an angle that
    grows with the translation.
    """
    theta = np.array(theta, dtype=float)
    delta = np.asarray(delta, dtype=float)
    r = delta_rotation(delta)
    for j in _SHOULDERS:
        theta[..., j - 1, :] = matrix_to_aa(r @ aa_to_matrix(theta[..., j - 1, :]))
    bend = ELBOW_GAIN * np.linalg.norm(delta[..., 3:], axis=-1)
    for j, sgn in zip(_ELBOWS, (1.0, -1.0)):
        flex = aa_to_matrix(np.stack([np.zeros_like(bend), np.zeros_like(bend), sgn * bend], -1))
        theta[..., j - 1, :] = matrix_to_aa(flex @ aa_to_matrix(theta[..., j - 1, :]))
    return theta


def synthetic_pairs(body, thetas, n, noise=NoiseSpec(), seed=0, jitter_deg=3.0):
    """``n`` (positive, negative, delta) pairs built from a bank of plausible poses.

    Positives are bank poses with small per-joint jitter; each negative displaces
    its positive with a sampled delta.
    """
    rng = np.random.default_rng(seed)
    bank = np.asarray(thetas, dtype=float).reshape(-1, 21, 3)
    pick = rng.integers(0, len(bank), size=n)
    jitter = rng.normal(scale=np.deg2rad(jitter_deg), size=(n, 21, 3))
    pos = matrix_to_aa(aa_to_matrix(jitter) @ aa_to_matrix(bank[pick]))
    deltas = noise.sample(rng, n)
    neg = np.stack([displace_pose(p, d) for p, d in zip(pos, deltas)])
    zero = np.zeros((n, 3))
    return (pose_features(body, Pose(pos, zero, zero)),
            pose_features(body, Pose(neg, zero, zero)), deltas)


def split(n, frac=0.8, seed=0):
    order = np.random.default_rng(seed).permutation(n)
    k = int(round(frac * n))
    return order[:k], order[k:]


# ---------------------------------------------------------------- checkpoint


def save_model(model, path):
    """Binary checkpoint: magic, layer count, dims, activation id, then f32 weights and biases."""
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(model.layers)))
        fh.write(struct.pack(f"<{len(model.layers)}I", *model.layers))
        fh.write(struct.pack("<I", ACTIVATIONS.index(model.activation)))
        for lin in model.linears:
            fh.write(lin.weight.detach().numpy().astype("<f4").tobytes())
            fh.write(lin.bias.detach().numpy().astype("<f4").tobytes())


def load_model(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MODEL_MAGIC:
        raise ParseError("not a ranking model checkpoint", field="magic")
    try:
        (k,) = struct.unpack_from("<I", data, 4)
        dims = struct.unpack_from(f"<{k}I", data, 8)
        (act,) = struct.unpack_from("<I", data, 8 + 4 * k)
        model = RankingModel(dims, ACTIVATIONS[act])
        off = 12 + 4 * k
        for lin, (a, b) in zip(model.linears, zip(dims[:-1], dims[1:])):
            w = np.frombuffer(data, "<f4", a * b, off).reshape(b, a)
            off += 4 * a * b
            bias = np.frombuffer(data, "<f4", b, off)
            off += 4 * b
            with torch.no_grad():
                lin.weight.copy_(torch.from_numpy(w.copy()))
                lin.bias.copy_(torch.from_numpy(bias.copy()))
    except (struct.error, ValueError, IndexError) as e:
        raise ParseError(f"truncated or corrupt checkpoint: {e}") from None
    if off != len(data):
        raise ParseError("trailing bytes in checkpoint")
    model.eval()
    return model
