"""Shape morphing between SDF grids and chained nearest-point contact transfer."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyCandidate, IncompatibleLattice, ParseError
from .geometry import SdfGrid, compute_sdf, marching_cubes, nearest_surface_point

HAND_ORDER = ("agent1_left", "agent1_right", "agent2_left", "agent2_right")


def blend_weight(i, n):
    """Weight of the source field at step ``i`` of ``n`` intermediates."""
    return (n + 1 - i) / (n + 1)


def common_lattice(a, b):
    """Union of both boxes at the finer spacing; a shared lattice is reused as is."""
    if a.same_lattice(b):
        return a.origin, a.spacing, a.dims
    lo = np.minimum(a.origin, b.origin)
    hi = np.maximum(a.upper, b.upper)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise IncompatibleLattice("grid bounds are not finite")
    spacing = min(a.spacing, b.spacing)
    dims = tuple(int(d) for d in np.ceil((hi - lo) / spacing - 1e-9).astype(int) + 1)
    if np.prod(dims, dtype=float) > 512 ** 3:
        raise IncompatibleLattice(f"common lattice {dims} too large; grids are too far apart")
    return lo, spacing, dims


def resample(grid, origin, spacing, dims):
    if grid.same_lattice(SdfGrid(origin, spacing, dims, np.zeros(dims))):
        return grid
    nodes = SdfGrid(origin, spacing, dims, np.zeros(dims)).node_positions()
    return SdfGrid(origin, spacing, dims, grid.sample(nodes))


def interpolate_sdf(source, target, i, n):
    """Field at step ``i`` of ``n``: ``w*source + (1-w)*target`` on the common lattice."""
    if not 1 <= i <= n:
        raise ValueError(f"need 1 <= i <= n, got i={i}, n={n}")
    origin, spacing, dims = common_lattice(source, target)
    s = resample(source, origin, spacing, dims).values
    t = resample(target, origin, spacing, dims).values
    w = blend_weight(i, n)
    # written as t + w (s - t) so identical inputs come back bit-exact
    return SdfGrid(origin, spacing, dims, t + w * (s - t))


@dataclass
class MorphSequence:
    """Meshes and grids ``[source', M_1 .. M_N, target']`` plus the original end meshes."""
    meshes: list
    grids: list
    n_intermediates: int
    weights: list
    source: object = None
    target: object = None

    @property
    def spacing(self):
        return min(g.spacing for g in self.grids)

    def chain(self):
        """Surfaces contacts walk through: the intermediates, then the exact target mesh."""
        return list(self.meshes[1:-1]) + [self.target if self.target is not None else self.meshes[-1]]


def build_morph_sequence(source, target, n=4, resolution=64, padding=None,
                         source_sdf=None, target_sdf=None):
    if n < 0:
        raise ValueError("n must be >= 0")
    gs = source_sdf if source_sdf is not None else compute_sdf(source, padding=padding, resolution=resolution)
    gt = target_sdf if target_sdf is not None else compute_sdf(target, padding=padding, resolution=resolution)
    grids = [gs] + [interpolate_sdf(gs, gt, i, n) for i in range(1, n + 1)] + [gt]
    meshes = [marching_cubes(g) for g in grids]
    weights = [blend_weight(i, n) for i in range(1, n + 1)]
    return MorphSequence(meshes, grids, n, weights, source, target)


@dataclass
class ContactCandidate:
    hands: tuple                     # four int arrays of source-mesh vertex indices
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.hands) != 4:
            raise ValueError("a contact candidate has exactly four hand sets")
        self.hands = tuple(np.unique(np.asarray(h, dtype=np.int64)) for h in self.hands)

    def is_empty(self):
        return all(len(h) == 0 for h in self.hands)

    def validate(self, mesh):
        n = len(mesh.vertices)
        for h in self.hands:
            if len(h) and (h.min() < 0 or h.max() >= n):
                raise ValueError("contact index out of range for the source mesh")

    def to_dict(self):
        d = {"hands": [h.tolist() for h in self.hands]}
        if self.provenance:
            d["provenance"] = self.provenance
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(tuple(d["hands"]), dict(d.get("provenance", {})))
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"bad contact candidate: {e}", field="hands") from None

    def key(self):
        return tuple(tuple(h.tolist()) for h in self.hands)


@dataclass
class ContactConstraint:
    hands: tuple    # four (k, 3) point arrays in the object frame

    def __post_init__(self):
        if len(self.hands) != 4:
            raise ValueError("a contact constraint has exactly four hand sets")
        self.hands = tuple(np.asarray(h, dtype=float).reshape(-1, 3) for h in self.hands)

    def is_empty(self):
        return all(len(h) == 0 for h in self.hands)

    def to_dict(self):
        return {"hands": [h.tolist() for h in self.hands]}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(tuple(d["hands"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"bad contact constraint: {e}", field="hands") from None


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj.to_dict(), fh)


def read_candidate(path):
    with open(path) as fh:
        return ContactCandidate.from_dict(json.load(fh))


def read_constraint(path):
    with open(path) as fh:
        return ContactConstraint.from_dict(json.load(fh))


def transfer_points(points, surfaces):
    """Walk points across ``surfaces`` one nearest-point hop at a time."""
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    for s in surfaces:
        if len(p):
            p, _ = nearest_surface_point(s, p)
    return p


def transfer_contacts(cand, morph):
    if cand.is_empty():
        raise EmptyCandidate("all four hand sets are empty")
    src = morph.source if morph.source is not None else morph.meshes[0]
    cand.validate(src)
    chain = morph.chain()
    # one pass for all hands keeps per-point identity and shares the queries
    sizes = [len(h) for h in cand.hands]
    pts = transfer_points(src.vertices[np.concatenate(cand.hands)], chain)
    out, s = [], 0
    for k in sizes:
        out.append(pts[s:s + k])
        s += k
    return ContactConstraint(tuple(out))


def save_morph(morph, path):
    """Exact (float64) archive of a morph sequence, including the original end meshes."""
    arrays = {"n_intermediates": np.array(morph.n_intermediates), "weights": np.array(morph.weights)}
    for k, (m, g) in enumerate(zip(morph.meshes, morph.grids)):
        arrays[f"mesh{k}_v"], arrays[f"mesh{k}_f"] = m.vertices, m.faces
        arrays[f"grid{k}_origin"], arrays[f"grid{k}_values"] = g.origin, g.values
        arrays[f"grid{k}_spacing"] = np.array(g.spacing)
    for name, m in (("source", morph.source), ("target", morph.target)):
        if m is not None:
            arrays[f"{name}_v"], arrays[f"{name}_f"] = m.vertices, m.faces
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_morph(path):
    from .geometry import TriMesh
    try:
        with np.load(path) as z:
            n = int(z["n_intermediates"])
            meshes, grids = [], []
            for k in range(n + 2):
                meshes.append(TriMesh(z[f"mesh{k}_v"], z[f"mesh{k}_f"]))
                vals = z[f"grid{k}_values"]
                grids.append(SdfGrid(z[f"grid{k}_origin"], float(z[f"grid{k}_spacing"]), vals.shape, vals))
            ends = [TriMesh(z[f"{s}_v"], z[f"{s}_f"]) if f"{s}_v" in z else None for s in ("source", "target")]
            weights = z["weights"].tolist()
    except (KeyError, ValueError, OSError) as e:
        raise ParseError(f"bad morph archive: {e}") from None
    return MorphSequence(meshes, grids, n, weights, ends[0], ends[1])
