import json
import math

import numpy as np
import pytest

from imhd_vem import mesh as M


def square_cell():
    return M.Mesh(np.array([[0, 0], [1, 0], [1, 1], [0, 1.0]]), [[0, 1, 2, 3]])


def interior_angles_reflex(xy):
    d1 = np.roll(xy, -1, axis=0) - xy
    d0 = xy - np.roll(xy, 1, axis=0)
    cross = d0[:, 0] * d1[:, 1] - d0[:, 1] * d1[:, 0]
    return (cross < -1e-12).any()


def test_single_square_topology():
    m = square_cell()
    assert m.n_edges == 4
    assert m.boundary_edges.sum() == 4
    assert m.boundary_vertices.all()


def test_two_by_two_grid_edges():
    m = M.structured_quads(2, 2)
    assert m.n_cells == 4
    assert m.n_edges == 12
    assert (~m.boundary_edges).sum() == 4
    # every interior edge has two cells
    assert (m.edge_cells[~m.boundary_edges] >= 0).all()


def test_load_rejects_clockwise(tmp_path):
    p = tmp_path / "cw.json"
    p.write_text(json.dumps({"vertices": [[0, 0], [1, 0], [1, 1], [0, 1]], "cells": [[0, 3, 2, 1]]}))
    with pytest.raises(M.MeshError, match="counter-clockwise"):
        M.load_mesh(p)


def test_load_rejects_repeated_vertex(tmp_path):
    p = tmp_path / "dup.json"
    p.write_text(json.dumps({"vertices": [[0, 0], [1, 0], [1, 1]], "cells": [[0, 1, 2, 1]]}))
    with pytest.raises(M.MeshError):
        M.load_mesh(p)


def test_load_rejects_garbage(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(M.MeshError):
        M.load_mesh(p)


def test_roundtrip(tmp_path):
    m = M.generate_voronoi(30, 3)
    p = tmp_path / "m.json"
    M.save_mesh(m, p)
    m2 = M.load_mesh(p)
    assert np.array_equal(m.vertices, m2.vertices)
    assert all(np.array_equal(a, b) for a, b in zip(m.cells, m2.cells))


def test_geometry_square_triangle_hexagon():
    g = M.polygon_geometry(np.array([[0, 0], [1, 0], [1, 1], [0, 1.0]]))
    assert np.allclose(g.centroid, [0.5, 0.5])
    assert g.area == pytest.approx(1.0)
    assert g.diameter == pytest.approx(math.sqrt(2))
    t = M.polygon_geometry(np.array([[0, 0], [1, 0], [0, 1.0]]))
    assert t.area == pytest.approx(0.5)
    assert np.allclose(t.centroid, [1 / 3, 1 / 3])
    assert t.diameter == pytest.approx(math.sqrt(2))
    ang = np.arange(6) * np.pi / 3
    h = M.polygon_geometry(np.column_stack([np.cos(ang), np.sin(ang)]))
    assert h.area == pytest.approx(3 * math.sqrt(3) / 2)


@pytest.mark.parametrize(
    "mesh",
    [
        M.generate_voronoi(25, 1),
        M.generate_remapped_square(5),
        M.generate_nonconvex(4),
        M.generate_lshape_tri(0),
    ],
    ids=["voronoi", "remapped", "nonconvex", "lshape"],
)
def test_family_invariants(mesh):
    areas = mesh.cell_areas()
    assert (areas > 0).all()
    target = 0.75 if mesh.vertices.min() < 0 else 1.0
    assert areas.sum() == pytest.approx(target, rel=1e-12)
    counts = (mesh.edge_cells >= 0).sum(axis=1)
    assert set(counts[mesh.boundary_edges]) == {1}
    assert set(counts[~mesh.boundary_edges]) <= {2}
    for c in range(mesh.n_cells):
        g = mesh.geometry(c)
        flux = (g.normals * g.edge_length[:, None]).sum(axis=0)
        assert np.abs(flux).max() <= 1e-12 * g.diameter
        # divergence theorem for v = x - x_E
        mid = 0.5 * (g.edge_start + g.edge_end) - g.centroid
        div = ((mid * g.normals).sum(axis=1) * g.edge_length).sum()
        assert div == pytest.approx(2 * g.area, rel=1e-12)


def test_voronoi_deterministic_and_single():
    a, b = M.generate_voronoi(25, 1), M.generate_voronoi(25, 1)
    assert np.array_equal(a.vertices, b.vertices)
    assert a.n_cells == 25
    rep = M.check_regularity(a)
    assert rep.convex.all()
    one = M.generate_voronoi(1, 0)
    assert one.n_cells == 1 and one.cell_areas()[0] == pytest.approx(1.0)


def test_lloyd_changes_mesh():
    a, b = M.generate_voronoi(20, 2, 0), M.generate_voronoi(20, 2, 3)
    assert a.n_cells == b.n_cells == 20
    assert a.vertices.shape != b.vertices.shape or not np.allclose(a.vertices, b.vertices)


def test_remapped_counts_and_regularity():
    assert M.generate_remapped_square(5).n_cells == 25
    assert M.generate_remapped_square(1).n_cells == 1
    rep = M.check_regularity(M.generate_remapped_square(10), alpha_e=0.1)
    assert rep.ok


def test_nonconvex_has_concave_cells():
    m = M.generate_nonconvex(10)
    assert m.n_cells == 100
    concave = [interior_angles_reflex(m.vertices[c]) for c in m.cells]
    # every tile below the top row is concave
    assert sum(concave) == 90
    assert M.generate_nonconvex(3).cell_areas().sum() == pytest.approx(1.0)


def test_lshape_counts():
    assert M.generate_lshape_tri(0).n_cells == 96
    assert M.generate_lshape_tri(1).n_cells == 384
    m = M.generate_lshape_tri(1)
    # no cell overlaps the removed quadrant
    cent = np.array([m.geometry(c).centroid for c in range(m.n_cells)])
    assert not ((cent[:, 0] > 0) & (cent[:, 1] < 0)).any()


def test_regularity_square_grid():
    rep = M.check_regularity(M.structured_quads(3, 3), alpha_e=0.7)
    assert rep.min_edge_ratio == pytest.approx(1 / math.sqrt(2))
    assert rep.ok
    assert (rep.star_ratio > 0).all()


def test_regularity_flags_sliver():
    m = M.Mesh(np.array([[0, 0], [1, 0], [1, 1e-4], [0, 1e-4]]), [[0, 1, 2, 3]])
    rep = M.check_regularity(m, alpha_e=0.01)
    assert list(rep.flagged) == [0]


def test_kernel_radius_nonconvex():
    # concave hexagon still has a nonempty kernel
    xy = np.array([[0, 0], [1, 0], [1, 1], [0.5, 0.7], [0, 1.0]])
    assert M.kernel_inradius(xy) > 0


def test_average_mesh_size():
    assert M.average_mesh_size(M.structured_quads(1, 1)) == pytest.approx(math.sqrt(2))
    assert M.average_mesh_size(M.structured_quads(2, 2)) == pytest.approx(math.sqrt(2) / 2)
    h1 = M.average_mesh_size(M.generate_remapped_square(5))
    h2 = M.average_mesh_size(M.generate_remapped_square(10))
    assert h2 < h1
    assert h1 / h2 == pytest.approx(2.0, rel=0.15)


def test_cylinder_mesh_valid():
    m = M.generate_cylinder_channel(16, 4)
    assert (m.cell_areas() > 0).all()
    hole = np.pi * 0.5**2 * (16 / (2 * np.pi)) * np.sin(2 * np.pi / 16)
    assert m.cell_areas().sum() == pytest.approx(16.0 - hole, rel=1e-12)
