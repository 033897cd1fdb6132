import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from collab_retarget.errors import DegenerateMesh, IsoOutOfRange, NonWatertight, ParseError
from collab_retarget.geometry import (SdfGrid, TriMesh, closest_points_on_mesh, compute_sdf, marching_cubes,
                                      nearest_surface_point, points_inside, read_obj, read_sdf, signed_distance,
                                      write_obj, write_sdf)
from collab_retarget.shapes import box_mesh, box_sdf, icosphere, torus


def brute_distance(mesh, p):
    """Closest distance by projecting onto every triangle (plane, then edges and vertices)."""
    best = np.inf
    for a, b, c in mesh.triangles:
        n = np.cross(b - a, c - a)
        n /= np.linalg.norm(n)
        q = p - np.dot(p - a, n) * n
        # barycentric test for the plane projection
        v0, v1, v2 = b - a, c - a, q - a
        d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
        d20, d21 = v2 @ v0, v2 @ v1
        den = d00 * d11 - d01 * d01
        v = (d11 * d20 - d01 * d21) / den
        w = (d00 * d21 - d01 * d20) / den
        if v >= 0 and w >= 0 and v + w <= 1:
            best = min(best, np.linalg.norm(p - q))
            continue
        for s, e in ((a, b), (b, c), (c, a)):
            t = np.clip(np.dot(p - s, e - s) / np.dot(e - s, e - s), 0, 1)
            best = min(best, np.linalg.norm(p - (s + t * (e - s))))
    return best


def ray_parity(mesh, p, direction=(0.31, 0.57, 0.76)):
    """Count crossings of a ray with every triangle (Moller-Trumbore)."""
    d = np.asarray(direction) / np.linalg.norm(direction)
    hits = 0
    for a, b, c in mesh.triangles:
        e1, e2 = b - a, c - a
        h = np.cross(d, e2)
        det = e1 @ h
        if abs(det) < 1e-14:
            continue
        s = p - a
        u = (s @ h) / det
        q = np.cross(s, e1)
        v = (d @ q) / det
        t = (e2 @ q) / det
        if u >= 0 and v >= 0 and u + v <= 1 and t > 0:
            hits += 1
    return hits % 2 == 1


# ---------------------------------------------------------------- meshes


def test_box_and_torus_are_watertight():
    assert box_mesh((0.4, 0.6, 0.3), spacing=0.05).is_watertight()
    t = torus()
    assert len(t.faces) == 500 and t.is_watertight()
    assert t.euler_characteristic() == 0


def test_degenerate_face_rejected():
    v = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], dtype=float)
    with pytest.raises(DegenerateMesh):
        TriMesh(v, [[0, 1, 2]])


def test_face_index_out_of_range():
    with pytest.raises(DegenerateMesh):
        TriMesh(np.eye(3), [[0, 1, 3]])


def test_open_mesh_rejected_with_edges(unit_cube):
    open_mesh = TriMesh(unit_cube.vertices, unit_cube.faces[:-1])
    with pytest.raises(NonWatertight) as exc:
        compute_sdf(open_mesh, resolution=16)
    assert len(exc.value.open_edges) == 3


def test_too_few_vertices():
    tri = TriMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]]), [[0, 1, 2], [0, 2, 1]])
    with pytest.raises(DegenerateMesh):
        compute_sdf(tri, resolution=16)


def test_low_resolution_rejected(unit_cube):
    with pytest.raises(ValueError):
        compute_sdf(unit_cube, resolution=7)


# ---------------------------------------------------------------- compute_sdf


@pytest.fixture(scope="module")
def cube_grid(unit_cube):
    return compute_sdf(unit_cube, padding=0.5, resolution=32)


def test_cube_sdf_center_and_outside(cube_grid):
    assert abs(cube_grid.sample([0.0, 0.0, 0.0]) + 0.5) < cube_grid.spacing
    assert abs(cube_grid.sample([1.0, 0.0, 0.0]) - 0.5) < cube_grid.spacing


def test_cube_grid_bounds(unit_cube, cube_grid):
    assert np.allclose(cube_grid.origin, -1.0)
    assert np.all(cube_grid.upper >= 1.0 - 1e-12)


def test_cube_sdf_matches_analytic(cube_grid):
    nodes = cube_grid.node_positions()
    assert np.abs(cube_grid.values - box_sdf(nodes, 0, 1)).max() < 1e-9


def test_sdf_lipschitz(cube_grid):
    v = cube_grid.values
    bound = np.sqrt(3) * cube_grid.spacing + 1e-9
    for axis in range(3):
        assert np.abs(np.diff(v, axis=axis)).max() <= bound


def test_sphere_sdf_oracle(sphere, rng):
    grid = compute_sdf(sphere, resolution=64)
    pts = rng.uniform(-1.1, 1.1, size=(1000, 3))
    err = np.abs(grid.sample(pts) - (np.linalg.norm(pts, axis=1) - 1.0))
    assert err.max() < grid.spacing


def test_sign_matches_ray_parity(sphere, rng):
    grid = compute_sdf(sphere, resolution=48)
    pts = grid.node_positions().reshape(-1, 3)
    pts = pts[rng.choice(len(pts), 1000, replace=False)]
    inside = points_inside(sphere, pts)
    idx = np.rint((pts - grid.origin) / grid.spacing).astype(int)
    vals = grid.values[idx[:, 0], idx[:, 1], idx[:, 2]]
    assert np.array_equal(vals < 0, inside)


def test_points_inside_agrees_with_brute_force_parity(rng):
    t = torus()
    pts = rng.uniform(-1.0, 1.0, size=(200, 3)) * [1, 1, 0.4]
    fast = points_inside(t, pts)
    slow = np.array([ray_parity(t, p) for p in pts])
    assert np.array_equal(fast, slow)


def test_signed_distance_exact_on_box(rng):
    box = box_mesh((0.6, 0.4, 0.2), subdivisions=2)
    pts = rng.uniform(-0.5, 0.5, size=(300, 3))
    assert np.abs(signed_distance(box, pts) - box_sdf(pts, 0, (0.6, 0.4, 0.2))).max() < 1e-12


# ---------------------------------------------------------------- marching cubes


def test_marching_cubes_sphere_radius(sphere):
    grid = compute_sdf(sphere, resolution=64)
    m = marching_cubes(grid)
    assert np.abs(np.linalg.norm(m.vertices, axis=1) - 1.0).max() < 1.5 * grid.spacing
    assert m.is_watertight()


def test_marching_cubes_cube_volume(unit_cube):
    m = marching_cubes(compute_sdf(unit_cube, resolution=48))
    assert abs(m.volume() - 1.0) < 0.05


def test_marching_cubes_iso_out_of_range():
    g = SdfGrid(np.zeros(3), 0.1, (4, 4, 4), np.arange(64, dtype=float).reshape(4, 4, 4) + 1.0)
    with pytest.raises(IsoOutOfRange):
        marching_cubes(g, iso=0.0)
    with pytest.raises(IsoOutOfRange):
        marching_cubes(g, iso=64.0)


def test_round_trip_surface_chamfer():
    box = box_mesh((0.5, 0.3, 0.4), subdivisions=4)
    grid = compute_sdf(box, resolution=48)
    m = marching_cubes(grid)
    _, d1, _ = closest_points_on_mesh(box, m.vertices)
    _, d2, _ = closest_points_on_mesh(m, box.vertices)
    assert 0.5 * (d1.mean() + d2.mean()) < 2 * grid.spacing


# ---------------------------------------------------------------- nearest point


def test_nearest_point_on_vertex(sphere):
    p, d = nearest_surface_point(sphere, sphere.vertices[7])
    assert np.allclose(p, sphere.vertices[7]) and d == 0.0


def test_nearest_point_sphere_query(sphere):
    p, d = nearest_surface_point(sphere, np.array([2.0, 0.0, 0.0]))
    assert np.allclose(p, [1, 0, 0], atol=1e-9) and abs(d - 1.0) < 1e-9


def test_nearest_point_torus_brute_force(rng):
    t = torus()
    q = rng.uniform(-1.2, 1.2, size=(60, 3))
    _, d = nearest_surface_point(t, q)
    ref = np.array([brute_distance(t, p) for p in q])
    assert np.abs(d - ref).max() < 1e-6


def test_nearest_point_grid_backed(sphere, rng):
    grid = compute_sdf(sphere, resolution=64)
    q = rng.normal(size=(100, 3))
    q *= rng.uniform(0.5, 1.5, size=(100, 1)) / np.linalg.norm(q, axis=1, keepdims=True)
    p, d = nearest_surface_point(grid, q)
    assert np.abs(grid.sample(p)).max() < grid.spacing / 2
    assert np.abs(d - np.abs(grid.sample(q))).max() < grid.spacing


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_nearest_point_distance_is_norm(q):
    box = box_mesh((1.0, 0.5, 0.8))
    q = np.array(q)
    p, d = nearest_surface_point(box, q)
    assert abs(d - np.linalg.norm(q - p)) < 1e-12
    assert abs(d - abs(box_sdf(q, 0, (1.0, 0.5, 0.8)))) < 1e-9


# ---------------------------------------------------------------- IO


def test_obj_round_trip(tmp_path, sphere):
    write_obj(sphere, tmp_path / "s.obj")
    back = read_obj(tmp_path / "s.obj")
    assert np.array_equal(back.vertices, sphere.vertices)
    assert np.array_equal(back.faces, sphere.faces)


def test_obj_parse_error_has_line(tmp_path):
    (tmp_path / "bad.obj").write_text("v 0 0 0\nv 1 zero 0\n")
    with pytest.raises(ParseError) as exc:
        read_obj(tmp_path / "bad.obj")
    assert exc.value.line == 2


def test_sdf_file_round_trip(tmp_path, cube_grid):
    write_sdf(cube_grid, tmp_path / "g.sdf")
    raw = (tmp_path / "g.sdf").read_bytes()
    assert raw[:4] == b"SDF1"
    back = read_sdf(tmp_path / "g.sdf")
    assert back.dims == cube_grid.dims and back.spacing == cube_grid.spacing
    assert np.array_equal(back.origin, cube_grid.origin)
    assert np.array_equal(back.values, cube_grid.values.astype(np.float32).astype(float))


def test_sdf_file_x_fastest(tmp_path):
    vals = np.arange(24, dtype=float).reshape(2, 3, 4)
    write_sdf(SdfGrid(np.zeros(3), 1.0, (2, 3, 4), vals), tmp_path / "g.sdf")
    body = np.frombuffer((tmp_path / "g.sdf").read_bytes()[4 + 8 * 4 + 12:], "<f4")
    assert body[:3].tolist() == [vals[0, 0, 0], vals[1, 0, 0], vals[0, 1, 0]]


def test_sdf_file_truncated(tmp_path, cube_grid):
    write_sdf(cube_grid, tmp_path / "g.sdf")
    raw = (tmp_path / "g.sdf").read_bytes()
    (tmp_path / "t.sdf").write_bytes(raw[:-5])
    with pytest.raises(ParseError):
        read_sdf(tmp_path / "t.sdf")
    (tmp_path / "m.sdf").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ParseError):
        read_sdf(tmp_path / "m.sdf")
