"""Watertight fixture shapes: boxes, spheres, tori and box-union furniture."""
from __future__ import annotations

import numpy as np

from .geometry import SdfGrid, TriMesh, lattice_for, marching_cubes


def _weld(vertices, faces, decimals=12):
    key = np.round(vertices, decimals)
    uniq, inverse = np.unique(key, axis=0, return_inverse=True)
    out = np.zeros((len(uniq), 3))
    out[inverse.ravel()] = vertices
    return out, inverse.ravel()[faces]


def box_mesh(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0), subdivisions=1, spacing=None):
    """Axis-aligned box with outward winding.

    Each face is split into a grid of quads: ``subdivisions`` per edge, or, when
    ``spacing`` is given, enough cells per axis to keep edges at most that long.
    """
    size = np.broadcast_to(np.asarray(size, dtype=float), (3,))
    if spacing is None:
        counts = [int(subdivisions)] * 3
    else:
        counts = [max(1, int(np.ceil(s / spacing - 1e-9))) for s in size]
    ts = [np.linspace(-0.5, 0.5, c + 1) for c in counts]
    verts, faces = [], []
    base = 0
    for axis in range(3):
        u_ax, v_ax = [a for a in range(3) if a != axis]
        nu, nv = counts[u_ax], counts[v_ax]
        for sign in (-1.0, 1.0):
            uu, vv = np.meshgrid(ts[u_ax], ts[v_ax], indexing="ij")
            p = np.zeros((nu + 1, nv + 1, 3))
            p[..., axis] = 0.5 * sign
            p[..., u_ax] = uu
            p[..., v_ax] = vv
            verts.append(p.reshape(-1, 3))
            idx = np.arange((nu + 1) * (nv + 1)).reshape(nu + 1, nv + 1) + base
            base += (nu + 1) * (nv + 1)
            a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
            c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
            quad = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
            # (u, v, axis) is right handed only for axis == 1 in this layout
            flip = (sign > 0) == (axis == 1)
            faces.append(quad[:, ::-1] if flip else quad)
    v, f = _weld(np.concatenate(verts), np.concatenate(faces))
    return TriMesh(v * size + np.asarray(center, dtype=float), f)


def icosphere(radius=1.0, subdivisions=3, center=(0.0, 0.0, 0.0)):
    """Subdivided icosahedron; ``subdivisions=3`` gives 1280 faces."""
    phi = (1 + 5 ** 0.5) / 2
    v = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        inv = inv.ravel()
        mid = v[uniq].mean(axis=1)
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = inv.reshape(3, -1).T + len(v)
        a, b, c = f.T
        ab, bc, ca = m.T
        f = np.concatenate([
            np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1),
        ])
        v = np.concatenate([v, mid])
    return TriMesh(v * radius + np.asarray(center, dtype=float), f)


def torus(major=0.6, minor=0.25, n_major=25, n_minor=10):
    """Torus about z; face count is ``2 * n_major * n_minor``."""
    u = np.arange(n_major) * 2 * np.pi / n_major
    w = np.arange(n_minor) * 2 * np.pi / n_minor
    uu, ww = np.meshgrid(u, w, indexing="ij")
    r = major + minor * np.cos(ww)
    v = np.stack([r * np.cos(uu), r * np.sin(uu), minor * np.sin(ww)], axis=-1).reshape(-1, 3)
    i, j = np.meshgrid(np.arange(n_major), np.arange(n_minor), indexing="ij")
    a = (i * n_minor + j).ravel()
    b = (((i + 1) % n_major) * n_minor + j).ravel()
    c = (((i + 1) % n_major) * n_minor + (j + 1) % n_minor).ravel()
    d = (i * n_minor + (j + 1) % n_minor).ravel()
    f = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return TriMesh(v, f)


def box_sdf(points, center, size):
    q = np.abs(points - np.asarray(center, dtype=float)) - 0.5 * np.asarray(size, dtype=float)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    return outside + np.minimum(q.max(axis=-1), 0.0)


def union_of_boxes(boxes, resolution=64, padding=0.05):
    """Mesh the union of ``(center, size)`` boxes through a sampled SDF."""
    lo = np.min([np.asarray(c) - 0.5 * np.asarray(s) for c, s in boxes], axis=0)
    hi = np.max([np.asarray(c) + 0.5 * np.asarray(s) for c, s in boxes], axis=0)
    origin, spacing, dims = lattice_for(lo - padding, hi + padding, resolution)
    grid = SdfGrid(origin, spacing, dims, np.zeros(dims))
    pts = grid.node_positions()
    vals = np.min([box_sdf(pts, c, s) for c, s in boxes], axis=0)
    return marching_cubes(SdfGrid(origin, spacing, dims, vals))


def stool_boxes(seat=0.4, height=0.45, leg=0.04):
    h = seat / 2 - leg / 2
    boxes = [((0, 0, height - 0.02), (seat, seat, 0.04))]
    for sx in (-1, 1):
        for sy in (-1, 1):
            boxes.append(((sx * h, sy * h, (height - 0.04) / 2), (leg, leg, height - 0.04)))
    return boxes


def chair_boxes(seat=0.4, height=0.45, back=0.4, leg=0.04):
    boxes = stool_boxes(seat, height, leg)
    boxes.append(((-seat / 2 + 0.02, 0, height + back / 2), (0.04, seat, back)))
    return boxes


def stool_mesh(resolution=64, **kw):
    return union_of_boxes(stool_boxes(**kw), resolution=resolution)


def chair_mesh(resolution=64, **kw):
    return union_of_boxes(chair_boxes(**kw), resolution=resolution)
