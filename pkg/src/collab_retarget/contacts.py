"""Hand-to-surface contact regions on the source mesh and candidate pools."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .morph import ContactCandidate
from .motion import CONTACT_THRESHOLD, contact_labels, hand_distances


def tips_in_object_frame(seq):
    """Fingertips in the per-frame object frame, grouped by hand: (N, 4, 5, 3)."""
    tips = seq.fingertips()                                   # (2, N, 10, 3)
    n = len(seq)
    local = seq.object.to_object_frame(tips.transpose(1, 0, 2, 3).reshape(n, 20, 3))
    return local.reshape(n, 4, 5, 3)


def contact_masks(seq, mesh, threshold=CONTACT_THRESHOLD):
    """Stored labels when present, otherwise detected from geometry: (N, 4) bool."""
    if seq.contacts is not None:
        return np.array(seq.contacts, dtype=bool)
    return contact_labels(hand_distances(seq, mesh), threshold)


def _tip_vertices(tree, tips, threshold):
    """Nearest mesh vertex of each tip that lies within ``threshold`` of it."""
    d, idx = tree.query(tips.reshape(-1, 3))
    return np.unique(idx[d < threshold]).astype(np.int64)


def _regions(tree, tips, active, threshold):
    return [_tip_vertices(tree, tips[h], threshold) if active[h] else np.zeros(0, dtype=np.int64)
            for h in range(4)]


def frame_candidates(seq, mesh, seq_id="source", threshold=CONTACT_THRESHOLD, masks=None):
    """One candidate per frame that has any contact.

    A hand's region is the set of mesh vertices nearest to its fingertips,
    restricted to tips within ``threshold`` of a vertex.
    """
    tree = cKDTree(mesh.vertices)
    local = tips_in_object_frame(seq)
    masks = contact_masks(seq, mesh, threshold) if masks is None else masks
    out = []
    for i in range(len(seq)):
        if not masks[i].any():
            continue
        hands = _regions(tree, local[i], masks[i], threshold)
        if all(len(h) == 0 for h in hands):
            continue
        out.append(ContactCandidate(tuple(hands), {"sequence": seq_id, "frames": [i, i + 1]}))
    return out


def sequence_candidate(seq, mesh, seq_id="source", threshold=CONTACT_THRESHOLD, masks=None):
    """The source's own contacts: per hand, the union of its regions over its contact frames."""
    tree = cKDTree(mesh.vertices)
    local = tips_in_object_frame(seq)
    masks = contact_masks(seq, mesh, threshold) if masks is None else masks
    hands = []
    for h in range(4):
        frames = np.flatnonzero(masks[:, h])
        if len(frames) == 0:
            hands.append(np.zeros(0, dtype=np.int64))
            continue
        hands.append(_tip_vertices(tree, local[frames, h], threshold))
    return ContactCandidate(tuple(hands), {"sequence": seq_id, "frames": [0, len(seq)], "kind": "sequence"})


def set_iou(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if len(a) == 0 and len(b) == 0:
        return 1.0
    inter = len(np.intersect1d(a, b, assume_unique=True))
    return inter / (len(a) + len(b) - inter)


def candidate_iou(a, b):
    """Smallest per-hand IoU: two candidates overlap only if every hand does."""
    return min(set_iou(x, y) for x, y in zip(a.hands, b.hands))


def mean_iou(a, b):
    return float(np.mean([set_iou(x, y) for x, y in zip(a.hands, b.hands)]))


def deduplicate(cands, min_iou=0.8):
    kept = []
    for c in cands:
        if c.is_empty():
            continue
        if any(candidate_iou(c, k) >= min_iou for k in kept):
            continue
        kept.append(c)
    return kept


def build_pool(sequences, mesh, ids=None, threshold=CONTACT_THRESHOLD, min_iou=0.8):
    """Candidate pool over all given source sequences on one source mesh.

    Each sequence contributes its whole-sequence contacts first, then per-frame
    candidates; near duplicates (every hand IoU >= ``min_iou``) are dropped.
    """
    ids = [f"seq{k}" for k in range(len(sequences))] if ids is None else ids
    cands = []
    for seq, sid in zip(sequences, ids):
        masks = contact_masks(seq, mesh, threshold)
        if not masks.any():
            continue
        cands.append(sequence_candidate(seq, mesh, sid, threshold, masks))
        cands.extend(frame_candidates(seq, mesh, sid, threshold, masks))
    return deduplicate(cands, min_iou)


def ring_neighbors(mesh):
    """Vertex adjacency as a list of index arrays."""
    return mesh.vertex_neighbors()


def dilate(cand, neighbors):
    hands = []
    for h in cand.hands:
        if len(h) == 0:
            hands.append(h)
            continue
        grown = np.concatenate([h] + [np.asarray(neighbors[i]) for i in h])
        hands.append(np.unique(grown))
    return ContactCandidate(tuple(hands), dict(cand.provenance, edit="dilate"))


def contract(cand, neighbors):
    """Drop boundary vertices (those with a neighbour outside the set); never empties a hand."""
    hands = []
    for h in cand.hands:
        if len(h) == 0:
            hands.append(h)
            continue
        inside = set(h.tolist())
        core = [i for i in h if all(j in inside for j in neighbors[i])]
        hands.append(np.array(core if core else h, dtype=np.int64))
    return ContactCandidate(tuple(hands), dict(cand.provenance, edit="contract"))
