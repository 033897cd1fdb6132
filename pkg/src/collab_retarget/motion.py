"""Motion sequences (object track + two agents), JSON IO and scripted toy scenes."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .body import JOINT_INDEX, WRISTS, ArticulatedBody, Pose, fingertip_positions, forward_kinematics
from .errors import ParseError, SchemaVersionMismatch
from .geometry import closest_points_on_mesh
from .rotations import aa_to_matrix, matrix_to_aa

SCHEMA_VERSION = "core-retarget/1"
LABELS = ("move1", "move2", "pass", "join", "leave")
CONTACT_THRESHOLD = 0.05


@dataclass(frozen=True)
class ObjectTrack:
    rotations: np.ndarray     # (N, 3) axis-angle
    translations: np.ndarray  # (N, 3)

    def __post_init__(self):
        r = np.array(self.rotations, dtype=float).reshape(-1, 3)
        t = np.array(self.translations, dtype=float).reshape(-1, 3)
        if len(r) != len(t):
            raise ValueError("rotation and translation tracks differ in length")
        if not (np.isfinite(r).all() and np.isfinite(t).all()):
            raise ValueError("object track contains non-finite values")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotations", r)
        object.__setattr__(self, "translations", t)

    def __len__(self):
        return len(self.rotations)

    def matrices(self):
        return aa_to_matrix(self.rotations)

    def transform(self, points):
        """Object-frame points (M,3) to world, per frame: (N, M, 3)."""
        return np.einsum("nij,mj->nmi", self.matrices(), points) + self.translations[:, None]

    def to_object_frame(self, points):
        """World points (N, M, 3) to the object frame of each frame."""
        return np.einsum("nji,nmj->nmi", self.matrices(), points - self.translations[:, None])


@dataclass(frozen=True)
class MotionSequence:
    object: ObjectTrack
    agents: tuple                 # two Pose tracks
    fps: float = 15.0
    object_id: str = "object"
    label: str = "move1"
    bodies: tuple = None          # two ArticulatedBody, default body when omitted
    contacts: np.ndarray = None   # optional (N, 4) bool, hand order a1L a1R a2L a2R
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.agents) != 2:
            raise ValueError("a motion sequence has exactly two agents")
        n = len(self.object)
        if n < 2:
            raise ValueError("a motion sequence needs at least two frames")
        for a in self.agents:
            if a.theta.ndim != 3 or len(a) != n:
                raise ValueError("agent tracks must match the object track length")
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        if self.label not in LABELS:
            raise ValueError(f"unknown collaboration label {self.label!r}")
        if self.bodies is None:
            object.__setattr__(self, "bodies", (ArticulatedBody.default(),) * 2)
        if self.contacts is not None:
            c = np.array(self.contacts, dtype=bool).reshape(n, 4)
            c.setflags(write=False)
            object.__setattr__(self, "contacts", c)

    def __len__(self):
        return len(self.object)

    def joints(self):
        """World joint positions (2, N, 22, 3)."""
        return np.stack([forward_kinematics(b, a)[0] for b, a in zip(self.bodies, self.agents)])

    def fingertips(self):
        """World fingertips (2, N, 10, 3)."""
        return np.stack([fingertip_positions(b, a) for b, a in zip(self.bodies, self.agents)])

    def with_(self, **kw):
        return replace(self, **kw)


# ---------------------------------------------------------------- contacts


def hand_distances(seq, mesh):
    """Per frame and hand, the smallest fingertip-to-surface distance: (N, 4)."""
    tips = seq.fingertips()                                 # (2, N, 10, 3)
    n = len(seq)
    local = seq.object.to_object_frame(tips.transpose(1, 0, 2, 3).reshape(n, 20, 3))
    _, d, _ = closest_points_on_mesh(mesh, local.reshape(-1, 3))
    return d.reshape(n, 4, 5).min(axis=2)


def contact_labels(distances, threshold=CONTACT_THRESHOLD):
    """Strict comparison: a hand exactly at the threshold is not in contact."""
    return np.asarray(distances) < threshold


# ---------------------------------------------------------------- IO


def _pose_to_json(p):
    return {"theta": p.theta.reshape(len(p), 63).tolist(),
            "root_orient": p.root_orient.tolist(),
            "root_transl": p.root_transl.tolist()}


def sequence_to_dict(seq):
    d = {
        "schema_version": SCHEMA_VERSION,
        "fps": seq.fps,
        "object_id": seq.object_id,
        "label": seq.label,
        "frames": len(seq),
        "object": {"rotations": seq.object.rotations.tolist(),
                   "translations": seq.object.translations.tolist()},
        "agents": [dict(_pose_to_json(a), body=b.to_dict()) for a, b in zip(seq.agents, seq.bodies)],
    }
    if seq.contacts is not None:
        d["contacts"] = seq.contacts.astype(int).tolist()
    if seq.meta:
        d["meta"] = seq.meta
    return d


def _get(d, key, path):
    try:
        return d[key]
    except (KeyError, TypeError):
        raise ParseError("missing or malformed field", field=f"{path}{key}") from None


def _array(value, shape, path):
    try:
        a = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ParseError("non-numeric array", field=path) from None
    if a.shape != shape:
        raise ParseError(f"expected shape {shape}, got {a.shape}", field=path)
    return a


def sequence_from_dict(d):
    version = _get(d, "schema_version", "")
    if version != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"expected {SCHEMA_VERSION!r}, found {version!r}")
    n = int(_get(d, "frames", ""))
    obj = _get(d, "object", "")
    track = ObjectTrack(_array(_get(obj, "rotations", "object."), (n, 3), "object.rotations"),
                        _array(_get(obj, "translations", "object."), (n, 3), "object.translations"))
    agents, bodies = [], []
    raw_agents = _get(d, "agents", "")
    if len(raw_agents) != 2:
        raise ParseError("expected two agents", field="agents")
    for k, a in enumerate(raw_agents):
        p = f"agents[{k}]."
        agents.append(Pose(_array(_get(a, "theta", p), (n, 63), p + "theta").reshape(n, 21, 3),
                           _array(_get(a, "root_orient", p), (n, 3), p + "root_orient"),
                           _array(_get(a, "root_transl", p), (n, 3), p + "root_transl")))
        bodies.append(ArticulatedBody.from_dict(a["body"]) if "body" in a else ArticulatedBody.default())
    contacts = None
    if "contacts" in d:
        contacts = _array(d["contacts"], (n, 4), "contacts").astype(bool)
    try:
        return MotionSequence(track, tuple(agents), float(_get(d, "fps", "")), str(d.get("object_id", "object")),
                              str(d.get("label", "move1")), tuple(bodies), contacts, dict(d.get("meta", {})))
    except ValueError as e:
        raise ParseError(str(e)) from None


def write_motion(seq, path):
    with open(path, "w") as fh:
        json.dump(sequence_to_dict(seq), fh)
        fh.write("\n")


def read_motion(path):
    with open(path) as fh:
        text = fh.read()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg}", line=e.lineno) from None
    return sequence_from_dict(d)


# ---------------------------------------------------------------- toy scenes


def smootherstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * u * (u * (6 * u - 15) + 10)


def _align(a, b):
    """Smallest rotation taking unit vector a onto unit vector b."""
    v = np.cross(a, b)
    c = float(np.dot(a, b))
    s = np.linalg.norm(v)
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        # antiparallel: half turn about any axis orthogonal to a
        axis = np.cross(a, [1.0, 0, 0]) if abs(a[0]) < 0.9 else np.cross(a, [0, 1.0, 0])
        axis /= np.linalg.norm(axis)
        return 2 * np.outer(axis, axis) - np.eye(3)
    return aa_to_matrix(v / s * np.arctan2(s, c))


def _arm_ik(body, pos, glob, side, wrist_target, wrist_rot):
    """Two-link arm IK with the elbow pointing down and out.

    Returns local axis-angles for shoulder, elbow and wrist joints of ``side``
    (0 left, 1 right) given FK of the torso in ``pos``/``glob``; the wrist ends
    with global rotation ``wrist_rot``.
    """
    names = ("left", "right")[side]
    j_col, j_sh, j_el, j_wr = (JOINT_INDEX[f"{names}_{n}"] for n in ("collar", "shoulder", "elbow", "wrist"))
    rest = np.array([0.0, 1.0 if side == 0 else -1.0, 0.0])
    a = body.bone_lengths[j_el - 1]     # shoulder -> elbow
    b = body.bone_lengths[j_wr - 1]     # elbow -> wrist
    s = pos[j_sh]
    to_w = wrist_target - s
    dist = np.clip(np.linalg.norm(to_w), abs(a - b) + 1e-6, a + b - 1e-6)
    u = to_w / np.linalg.norm(to_w)
    w = s + u * dist
    up = glob[0][:, 2]
    lateral = glob[0][:, 1] * (1.0 if side == 0 else -1.0)
    pole = -up + 0.6 * lateral
    pole -= np.dot(pole, u) * u
    pole /= np.linalg.norm(pole)
    cos_a = (a * a + dist * dist - b * b) / (2 * a * dist)
    elbow = s + a * (cos_a * u + np.sqrt(max(1 - cos_a ** 2, 0.0)) * pole)
    e1 = (elbow - s) / a
    e2 = (w - elbow) / b
    g_col = glob[j_col]
    g_sh = _align(g_col @ rest, e1) @ g_col
    g_el = _align(g_sh @ rest, e2) @ g_sh
    return {j_sh: matrix_to_aa(g_col.T @ g_sh),
            j_el: matrix_to_aa(g_sh.T @ g_el),
            j_wr: matrix_to_aa(g_el.T @ wrist_rot)}


def _hand_frame(side, finger_dir, inward):
    """Wrist rotation with the fingers along ``finger_dir`` and the palm facing ``inward``."""
    y = finger_dir if side == 0 else -finger_dir   # rest fingers run along +y (left) / -y (right)
    z = -inward                                    # palms face local -z
    return np.stack([np.cross(y, z), y, z], axis=1)


def _agent_track(body, root_orient, root_transl, hand_points, finger_dirs, inward, torso_theta=None):
    """Per-frame arm IK so the middle fingertip of each hand sits at ``hand_points``."""
    n = len(root_orient)
    theta = np.zeros((n, 21, 3)) if torso_theta is None else np.array(torso_theta, dtype=float)
    for i in range(n):
        pose = Pose(theta[i], root_orient[i], root_transl[i])
        pos, glob = forward_kinematics(body, pose)
        for side in (0, 1):
            g = _hand_frame(side, finger_dirs[i, side], inward[i, side])
            target = hand_points[i, side] - g @ body.fingertip_offsets[side][2]
            for j, aa in _arm_ik(body, pos, glob, side, target, g).items():
                theta[i, j - 1] = aa
    return Pose(theta, root_orient, root_transl)


def _box_size(mesh):
    lo, hi = mesh.aabb()
    return hi - lo, 0.5 * (hi + lo)


def generate_toy_scene(kind, frames, obj, seed=0, fps=15.0, body=None):
    """Scripted two-agent interaction with a box-like object.

    ``carry``: both agents hold the object from opposite ends and carry it along
    a smooth path. ``handover``: static agents pass the object from one to the
    other. The agents stand on the -y and +y sides; palms press on the +-x faces.
    """
    if frames < 10:
        raise ValueError("a toy scene needs at least 10 frames")
    if kind not in ("carry", "handover"):
        raise ValueError(f"unknown toy scene kind {kind!r}")
    rng = np.random.default_rng(seed)
    body = ArticulatedBody.default() if body is None else body
    size, center = _box_size(obj)
    n = frames
    u = np.arange(n) / (n - 1)
    hold_height = 1.0 + rng.uniform(-0.03, 0.03)
    gap = 0.003
    hover = 0.12
    half = 0.5 * size
    inset = min(0.12, 0.6 * half[1])
    # agent 1 stands on the -y side facing +y, agent 2 opposite; palms press on the
    # +-x side faces near each agent's end with the fingers pointing forward
    local_pts = np.zeros((2, 2, 3))
    local_in = np.zeros((2, 2, 3))
    local_fwd = np.zeros((2, 3))
    for k, sy in enumerate((-1.0, 1.0)):
        local_fwd[k] = [0.0, -sy, 0.0]
        for side, sx in enumerate((sy, -sy)):        # agent 1's left is world -x
            local_pts[k, side] = [sx * (half[0] + gap), sy * (half[1] - inset), 0.0]
            local_in[k, side] = [-sx, 0.0, 0.0]
    local_pts += center
    stand = half[1] - inset + 0.375 + rng.uniform(-0.02, 0.02)

    if kind == "carry":
        start = np.array([0.0, 0.0, hold_height]) - center
        travel = np.array([rng.uniform(0.4, 0.7), rng.uniform(-0.2, 0.2), rng.uniform(-0.05, 0.05)])
        yaw_total = np.deg2rad(rng.uniform(-15, 15))
        s = smootherstep((u - 0.15) / 0.7)
        obj_t = start + s[:, None] * travel
        obj_r = np.zeros((n, 3))
        obj_r[:, 2] = s * yaw_total
        approach = smootherstep(u / 0.15) * (1 - smootherstep((u - 0.85) / 0.15))
        engage = np.stack([approach, approach], axis=1)         # (n, agents)
        label = "move1"
    else:
        start = np.array([-0.0, 0.0, hold_height]) - center
        s = smootherstep((u - 0.2) / 0.6)
        obj_t = start + np.outer(2 * s - 1, [0.0, 0.03, 0.0])
        obj_r = np.zeros((n, 3))
        ramp = 0.1
        a1 = 1 - smootherstep((u - 0.65 + ramp) / ramp)
        a2 = smootherstep((u - 0.35) / ramp)
        engage = np.stack([a1, a2], axis=1)
        label = "pass"

    rot = aa_to_matrix(obj_r)
    agents = []
    for k in range(2):
        yaw = np.pi / 2 if k == 0 else -np.pi / 2
        if kind == "carry":
            # roots ride rigidly with the object
            rel = np.array([0.0, -stand if k == 0 else stand, 0.0])
            root_t = obj_t + center @ rot.transpose(0, 2, 1) + np.einsum("nij,j->ni", rot, rel)
            root_r = matrix_to_aa(rot @ aa_to_matrix([0.0, 0.0, yaw]))
        else:
            base = np.array([0.0, -stand if k == 0 else stand, 0.0]) + start + center
            root_t = np.repeat(base[None], n, axis=0)
            root_r = np.repeat(np.array([[0.0, 0.0, yaw]]), n, axis=0)
        # pelvis height so the feet rest on the ground
        root_t = root_t.copy()
        root_t[:, 2] = _standing_height(body)
        pts = np.einsum("nij,hj->nhi", rot, local_pts[k]) + obj_t[:, None]
        inward = np.einsum("nij,hj->nhi", rot, local_in[k])
        fwd = np.repeat(np.einsum("nij,j->ni", rot, local_fwd[k])[:, None], 2, axis=1)
        off = hover * (1 - engage[:, k])
        hand_pts = pts - off[:, None, None] * inward
        agents.append(_agent_track(body, root_r, root_t, hand_pts, fwd, inward))
    seq = MotionSequence(ObjectTrack(obj_r, obj_t), tuple(agents), fps, "box", label, (body, body),
                         meta={"generator": kind, "seed": int(seed)})
    contacts = contact_labels(hand_distances(seq, obj))
    return seq.with_(contacts=contacts)


def _standing_height(body):
    """Pelvis height that puts the lowest rest joint 2 cm above the ground."""
    rest = body.rest_joints()
    return 0.02 - rest[:, 2].min()
