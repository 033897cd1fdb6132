"""Evaluation metrics: joint, object and contact errors, penetration rate, reports."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from .body import forward_kinematics, points_in_capsules, surface_capsules
from .errors import LengthMismatch
from .motion import CONTACT_THRESHOLD, contact_labels, hand_distances
from .rotations import geodesic_angle


@dataclass
class MetricReport:
    J_e: float      # mm
    T_e: float      # mm
    R_e: float      # degrees
    C_acc: float    # percent
    P_r: float      # percent

    def to_dict(self):
        return asdict(self)

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for k, v in self.to_dict().items():
                w.writerow([k, repr(float(v))])


def _same_length(a, b):
    if len(a) != len(b):
        raise LengthMismatch(f"sequences differ in length: {len(a)} vs {len(b)}")


def mpjpe(pred, gt, body, root_relative=False):
    """Mean joint position error in mm between two pose tracks (or lists of tracks).

    ``pred``/``gt`` are Pose tracks, or sequences of them (agents); ``body`` is one
    body or one per agent. With ``root_relative`` the pelvis is subtracted first.
    """
    preds = pred if isinstance(pred, (list, tuple)) else [pred]
    gts = gt if isinstance(gt, (list, tuple)) else [gt]
    bodies = body if isinstance(body, (list, tuple)) else [body] * len(preds)
    if len(preds) != len(gts):
        raise LengthMismatch("different agent counts")
    errs = []
    for p, g, b in zip(preds, gts, bodies):
        _same_length(p, g)
        jp = forward_kinematics(b, p)[0]
        jg = forward_kinematics(b, g)[0]
        if root_relative:
            jp = jp - jp[..., :1, :]
            jg = jg - jg[..., :1, :]
        errs.append(np.linalg.norm(jp - jg, axis=-1))
    return float(np.mean(errs) * 1000.0)


def sequence_mpjpe(pred_seq, gt_seq, root_relative=False):
    return mpjpe(list(pred_seq.agents), list(gt_seq.agents), list(gt_seq.bodies), root_relative)


def object_errors(pred, gt):
    """(T_e in mm, R_e in degrees) between two object tracks."""
    _same_length(pred, gt)
    t_e = np.linalg.norm(pred.translations - gt.translations, axis=-1).mean() * 1000.0
    r_e = np.rad2deg(geodesic_angle(pred.matrices(), gt.matrices())).mean()
    return float(t_e), float(r_e)


def contact_flags(seq, mesh, threshold=CONTACT_THRESHOLD):
    """(N, 4) hand contact flags from geometry: min tip distance strictly below threshold."""
    return contact_labels(hand_distances(seq, mesh), threshold)


def contact_accuracy(pred, gt, mesh, threshold=CONTACT_THRESHOLD, gt_mesh=None):
    """Percentage of (frame, hand) contact states that agree between pred and gt."""
    _same_length(pred, gt)
    a = contact_flags(pred, mesh, threshold)
    b = contact_flags(gt, mesh if gt_mesh is None else gt_mesh, threshold)
    return float(100.0 * (a == b).mean())


def penetration_rate(seq, mesh):
    """Mean over frames of the percentage of object vertices inside any capsule of either agent."""
    verts = seq.object.transform(np.asarray(mesh.vertices))      # (N, V, 3)
    caps = [surface_capsules(b, a) for b, a in zip(seq.bodies, seq.agents)]
    rates = np.zeros(len(seq))
    for i in range(len(seq)):
        inside = np.zeros(len(mesh.vertices), dtype=bool)
        for c in caps:
            inside |= points_in_capsules(verts[i], type(c)(c.a[i], c.b[i], c.radius))
        rates[i] = inside.mean()
    return float(100.0 * rates.mean())


def evaluate(pred, gt, mesh, gt_mesh=None, threshold=CONTACT_THRESHOLD):
    """Full report of a predicted motion against a reference on the same object."""
    t_e, r_e = object_errors(pred.object, gt.object)
    return MetricReport(
        J_e=sequence_mpjpe(pred, gt),
        T_e=t_e,
        R_e=r_e,
        C_acc=contact_accuracy(pred, gt, mesh, threshold, gt_mesh),
        P_r=penetration_rate(pred, mesh),
    )
