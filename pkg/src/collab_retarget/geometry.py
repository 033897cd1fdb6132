"""Triangle meshes, voxel signed distance fields and proximity queries.

Sign convention: distances are negative inside a closed surface and positive
outside.  Grids are indexed ``values[i, j, k]`` with ``i`` along x.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes as _skimage_marching_cubes

from ._kernels import closest_grouped
from .errors import DegenerateMesh, IsoOutOfRange, NonWatertight, ParseError

DEGENERATE_AREA = 1e-12
SDF_MAGIC = b"SDF1"

# Irrational sub-spacing offsets keep parity rays off mesh edges and vertices
# that happen to sit exactly on grid lines.
_RAY_JITTER = np.array([np.sqrt(2.0), np.sqrt(3.0)]) * 1e-7


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = _frozen(self.vertices, np.float64).reshape(-1, 3)
        f = _frozen(self.faces, np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise DegenerateMesh(f"face index out of range for {len(v)} vertices")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        bad = np.flatnonzero(self.face_areas() < DEGENERATE_AREA)
        if bad.size:
            raise DegenerateMesh(f"{bad.size} degenerate faces (first: {int(bad[0])})")

    @property
    def triangles(self):
        return self.vertices[self.faces]

    def face_areas(self):
        t = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def face_normals(self):
        t = self.vertices[self.faces]
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def aabb(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def edges(self):
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        return np.sort(e, axis=1)

    def open_edges(self):
        """Edges not shared by exactly two faces."""
        e, counts = np.unique(self.edges(), axis=0, return_counts=True)
        return e[counts != 2]

    def is_watertight(self):
        return len(self.faces) > 0 and len(self.open_edges()) == 0

    def euler_characteristic(self):
        used = np.unique(self.faces)
        n_edges = len(np.unique(self.edges(), axis=0))
        return len(used) - n_edges + len(self.faces)

    def volume(self):
        """Enclosed volume by the divergence theorem (orientation independent)."""
        t = self.vertices[self.faces]
        return abs(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    def vertex_neighbors(self):
        """Adjacency as a list of sorted neighbour-index arrays."""
        e = self.edges()
        e = np.concatenate([e, e[:, ::-1]])
        e = np.unique(e, axis=0)
        splits = np.searchsorted(e[:, 0], np.arange(1, len(self.vertices)))
        return np.split(e[:, 1], splits)

    def transformed(self, rotation=None, translation=None, scale=None):
        v = self.vertices
        if scale is not None:
            v = v * np.asarray(scale, dtype=float)
        if rotation is not None:
            v = v @ np.asarray(rotation, dtype=float).T
        if translation is not None:
            v = v + np.asarray(translation, dtype=float)
        return TriMesh(v, self.faces)


@dataclass(frozen=True, eq=False)
class SdfGrid:
    origin: np.ndarray
    spacing: float
    dims: tuple
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "origin", _frozen(self.origin, np.float64).reshape(3))
        object.__setattr__(self, "spacing", float(self.spacing))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        vals = _frozen(self.values, np.float64)
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        if vals.shape != self.dims:
            raise ValueError(f"values shape {vals.shape} does not match dims {self.dims}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("SDF values must be finite")
        object.__setattr__(self, "values", vals)

    @property
    def upper(self):
        return self.origin + (np.array(self.dims) - 1) * self.spacing

    def axes(self):
        return [self.origin[a] + np.arange(self.dims[a]) * self.spacing for a in range(3)]

    def node_positions(self):
        xs, ys, zs = self.axes()
        return np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1)

    def same_lattice(self, other):
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and np.array_equal(self.origin, other.origin)
        )

    def sample(self, points):
        """Trilinear interpolation; outside the box the distance to the box is added."""
        p = np.asarray(points, dtype=float)
        shape = p.shape[:-1]
        p = p.reshape(-1, 3)
        clamped = np.clip(p, self.origin, self.upper)
        idx = (clamped - self.origin) / self.spacing
        inside_val = ndimage.map_coordinates(self.values, idx.T, order=1, mode="nearest")
        outside = np.linalg.norm(p - clamped, axis=1)
        return (inside_val + outside).reshape(shape)

    def gradient(self, points, h=None):
        h = self.spacing * 0.5 if h is None else h
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        g = np.empty_like(p)
        for a in range(3):
            d = np.zeros(3)
            d[a] = h
            g[:, a] = (self.sample(p + d) - self.sample(p - d)) / (2 * h)
        return g.reshape(np.shape(points))


# ---------------------------------------------------------------- primitives


def _leaf_groups(centroids, leaf_size=16):
    """Median-split triangle ids into spatially compact groups."""
    groups = []
    stack = [np.arange(len(centroids))]
    while stack:
        ids = stack.pop()
        if len(ids) <= leaf_size:
            groups.append(ids)
            continue
        c = centroids[ids]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        srt = ids[np.argsort(c[:, axis], kind="stable")]
        half = len(srt) // 2
        stack.extend([srt[half:], srt[:half]])
    return groups


class _TriangleIndex:
    """Grouped triangle soup for exact nearest-surface queries."""

    def __init__(self, mesh):
        self.tri = np.ascontiguousarray(mesh.triangles)
        cent = self.tri.mean(axis=1)
        groups = _leaf_groups(cent)
        self.order = np.concatenate(groups).astype(np.int64)
        self.starts = np.cumsum([0] + [len(g) for g in groups]).astype(np.int64)
        self.lo = np.array([self.tri[g].reshape(-1, 3).min(axis=0) for g in groups])
        self.hi = np.array([self.tri[g].reshape(-1, 3).max(axis=0) for g in groups])
        self.group_of = np.empty(len(self.tri), dtype=np.int64)
        for gi, g in enumerate(groups):
            self.group_of[g] = gi
        self.tree = cKDTree(cent)

    def closest(self, points):
        pts = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
        _, seed = self.tree.query(pts, k=1)
        return closest_grouped(pts, self.tri, self.order, self.starts, self.lo, self.hi,
                               self.group_of[np.asarray(seed, dtype=np.int64)])


def closest_points_on_mesh(mesh, points):
    """Exact closest surface points.  Returns (points, distances, face ids)."""
    shape = np.shape(points)[:-1]
    q, d, f = _TriangleIndex(mesh).closest(points)
    return q.reshape(shape + (3,)), d.reshape(shape), f.reshape(shape)


def _ray_crossings_x(tri, ys, zs):
    """Count +x ray hits: returns list of (j, k, x_hit) arrays for lines y=ys[j], z=zs[k]."""
    y0, z0 = ys[0], zs[0]
    sy = ys[1] - ys[0] if len(ys) > 1 else 1.0
    sz = zs[1] - zs[0] if len(zs) > 1 else 1.0
    hj, hk, hx = [], [], []
    for t in tri:
        ty, tz = t[:, 1], t[:, 2]
        area2 = (ty[1] - ty[0]) * (tz[2] - tz[0]) - (ty[2] - ty[0]) * (tz[1] - tz[0])
        if abs(area2) < 1e-18:
            continue
        j0 = max(int(np.ceil((ty.min() - y0) / sy)), 0)
        j1 = min(int(np.floor((ty.max() - y0) / sy)), len(ys) - 1)
        k0 = max(int(np.ceil((tz.min() - z0) / sz)), 0)
        k1 = min(int(np.floor((tz.max() - z0) / sz)), len(zs) - 1)
        if j1 < j0 or k1 < k0:
            continue
        jj, kk = np.meshgrid(np.arange(j0, j1 + 1), np.arange(k0, k1 + 1), indexing="ij")
        jj, kk = jj.ravel(), kk.ravel()
        py, pz = ys[jj], zs[kk]
        w0 = ((ty[1] - py) * (tz[2] - pz) - (ty[2] - py) * (tz[1] - pz)) / area2
        w1 = ((ty[2] - py) * (tz[0] - pz) - (ty[0] - py) * (tz[2] - pz)) / area2
        w2 = 1.0 - w0 - w1
        hit = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if hit.any():
            hj.append(jj[hit])
            hk.append(kk[hit])
            hx.append(w0[hit] * t[0, 0] + w1[hit] * t[1, 0] + w2[hit] * t[2, 0])
    if not hj:
        e = np.empty(0)
        return e.astype(int), e.astype(int), e
    return np.concatenate(hj), np.concatenate(hk), np.concatenate(hx)


def _grid_inside(mesh, origin, spacing, dims):
    nx, ny, nz = dims
    xs = origin[0] + np.arange(nx) * spacing
    ys = origin[1] + np.arange(ny) * spacing + _RAY_JITTER[0] * spacing
    zs = origin[2] + np.arange(nz) * spacing + _RAY_JITTER[1] * spacing
    hj, hk, hx = _ray_crossings_x(mesh.triangles, ys, zs)
    # nodes with x < x_hit see this crossing along +x
    b = np.clip(np.ceil((hx - xs[0]) / spacing).astype(np.int64), 0, nx)
    acc = np.zeros((ny, nz, nx + 1), dtype=np.int64)
    np.add.at(acc, (hj, hk, np.zeros_like(b)), 1)
    np.add.at(acc, (hj, hk, b), -1)
    counts = np.cumsum(acc, axis=2)[:, :, :nx]
    return np.transpose(counts % 2 == 1, (2, 0, 1))


def points_inside(mesh, points):
    """Ray-parity inside test for arbitrary points (ray along a fixed generic direction)."""
    d = np.array([0.5773, 0.6181, 0.5335])
    d /= np.linalg.norm(d)
    # rotate so the ray direction becomes +x, then reuse the line test per point
    helper = np.array([0.0, 0.0, 1.0])
    e1 = d
    e2 = np.cross(helper, e1)
    e2 /= np.linalg.norm(e2)
    e3 = np.cross(e1, e2)
    basis = np.stack([e1, e2, e3])
    tri = mesh.triangles @ basis.T
    pts = np.asarray(points, dtype=float).reshape(-1, 3) @ basis.T
    inside = np.zeros(len(pts), dtype=bool)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    area2 = (b[:, 1] - a[:, 1]) * (c[:, 2] - a[:, 2]) - (c[:, 1] - a[:, 1]) * (b[:, 2] - a[:, 2])
    ok = np.abs(area2) > 1e-18
    a, b, c, area2 = a[ok], b[ok], c[ok], area2[ok]
    for s in range(0, len(pts), 256):
        p = pts[s:s + 256, None, :]
        py, pz = p[..., 1], p[..., 2]
        w0 = ((b[:, 1] - py) * (c[:, 2] - pz) - (c[:, 1] - py) * (b[:, 2] - pz)) / area2
        w1 = ((c[:, 1] - py) * (a[:, 2] - pz) - (a[:, 1] - py) * (c[:, 2] - pz)) / area2
        w2 = 1.0 - w0 - w1
        xh = w0 * a[:, 0] + w1 * b[:, 0] + w2 * c[:, 0]
        hit = (w0 >= 0) & (w1 >= 0) & (w2 >= 0) & (xh > p[..., 0])
        inside[s:s + 256] = hit.sum(axis=1) % 2 == 1
    return inside.reshape(np.shape(points)[:-1])


def signed_distance(mesh, points):
    """Exact signed distance for arbitrary points (no grid)."""
    _, d, _ = closest_points_on_mesh(mesh, points)
    return np.where(points_inside(mesh, points), -d, d)


# ---------------------------------------------------------------- operations


def validate_sdf_source(mesh):
    if len(mesh.vertices) < 4:
        raise DegenerateMesh("an SDF source mesh needs at least 4 vertices")
    open_edges = mesh.open_edges()
    if len(mesh.faces) == 0 or len(open_edges):
        raise NonWatertight(open_edges)


def lattice_for(lo, hi, resolution):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    spacing = float((hi - lo).max() / (resolution - 1))
    dims = tuple(int(d) for d in np.maximum(np.ceil((hi - lo) / spacing - 1e-9).astype(int) + 1, 2))
    return lo, spacing, dims


def compute_sdf(mesh, padding=None, resolution=64):
    """Dense signed distance grid of a watertight mesh.

    The grid covers the mesh AABB grown by ``padding`` on every side (10 % of
    the AABB diagonal when omitted) with ``resolution`` nodes along the
    longest axis.  Magnitudes are exact point-to-triangle distances; signs
    come from ray-crossing parity along grid lines.
    """
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    validate_sdf_source(mesh)
    lo, hi = mesh.aabb()
    if padding is None:
        padding = 0.1 * float(np.linalg.norm(hi - lo))
    origin, spacing, dims = lattice_for(lo - padding, hi + padding, resolution)
    nodes = origin + np.stack(
        np.meshgrid(*[np.arange(n) * spacing for n in dims], indexing="ij"), axis=-1
    )
    _, dist, _ = closest_points_on_mesh(mesh, nodes.reshape(-1, 3))
    inside = _grid_inside(mesh, origin, spacing, dims)
    values = np.where(inside, -1.0, 1.0) * dist.reshape(dims)
    return SdfGrid(origin, spacing, dims, values)


def marching_cubes(grid, iso=0.0):
    """Triangulate the ``iso`` level set of ``grid`` (closed when it stays inside the box)."""
    vmin, vmax = float(grid.values.min()), float(grid.values.max())
    if not (vmin < iso < vmax):
        raise IsoOutOfRange(f"iso {iso} not strictly inside value range [{vmin}, {vmax}]")
    verts, faces, _, _ = _skimage_marching_cubes(
        np.asarray(grid.values), level=iso, spacing=(grid.spacing,) * 3, allow_degenerate=False
    )
    verts = verts.astype(np.float64) + grid.origin
    tri = verts[faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    faces = faces[area >= DEGENERATE_AREA]
    used, inverse = np.unique(faces, return_inverse=True)
    return TriMesh(verts[used], inverse.reshape(-1, 3))


def nearest_surface_point(surface, query, iterations=20):
    """Closest surface point for a mesh (exact) or an SDF grid (projected).

    Returns ``(points, distances)`` with the leading shape of ``query``.
    """
    q = np.asarray(query, dtype=float)
    if isinstance(surface, TriMesh):
        p, d, _ = closest_points_on_mesh(surface, q)
        return p, d
    grid = surface
    p = q.reshape(-1, 3).copy()
    tol = grid.spacing * 1e-3
    for _ in range(iterations):
        val = grid.sample(p)
        if np.all(np.abs(val) < tol):
            break
        g = grid.gradient(p)
        gn2 = np.maximum((g * g).sum(axis=1), 1e-12)
        p = p - (val / gn2)[:, None] * g
    p = p.reshape(q.shape)
    return p, np.linalg.norm(q - p, axis=-1)


# ---------------------------------------------------------------- IO


def write_obj(mesh, path):
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path):
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) - 1 for tok in parts[1:]]
                for i in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[i], idx[i + 1]])
        except (ValueError, IndexError) as exc:
            raise ParseError(f"bad OBJ record: {exc}", line=lineno) from None
    return TriMesh(np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_sdf(grid, path):
    header = SDF_MAGIC + struct.pack("<3dd3I", *grid.origin, grid.spacing, *grid.dims)
    body = np.asarray(grid.values, dtype="<f4").tobytes(order="F")
    Path(path).write_bytes(header + body)


def read_sdf(path):
    raw = Path(path).read_bytes()
    if raw[:4] != SDF_MAGIC:
        raise ParseError("not an SDF1 file", field="magic")
    hsize = struct.calcsize("<3dd3I")
    if len(raw) < 4 + hsize:
        raise ParseError("truncated SDF header")
    ox, oy, oz, spacing, nx, ny, nz = struct.unpack("<3dd3I", raw[4:4 + hsize])
    n = nx * ny * nz
    body = raw[4 + hsize:]
    if len(body) != 4 * n:
        raise ParseError(f"expected {n} f32 values, found {len(body) // 4}", field="values")
    values = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape((nx, ny, nz), order="F")
    return SdfGrid(np.array([ox, oy, oz]), spacing, (nx, ny, nz), values)
