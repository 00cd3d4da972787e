import numpy as np
import pytest

from equilibra import mesh as m


def unit_square(n, tagger=None):
    return m.create_structured(("rectangle", (0.0, 0.0, 1.0, 1.0)), n, tagger=tagger)


def test_unit_square_resolution_one():
    mesh = unit_square(1)
    assert mesh.n_cells == 2
    assert mesh.n_facets == 5
    assert len(mesh.boundary_facets()) == 4


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_structured_counts(n):
    mesh = unit_square(n)
    assert mesh.n_cells == 2 * n * n
    assert mesh.n_vertices == (n + 1) ** 2
    # explicit enumeration of unique sorted edges
    edges = set()
    for tri in mesh.cells:
        for i in range(3):
            e = tuple(sorted((tri[i], tri[(i + 1) % 3])))
            edges.add(e)
    assert mesh.n_facets == len(edges)


def test_ccw_orientation_and_area():
    mesh = unit_square(3)
    assert np.all(mesh.cell_signed_areas() > 0)
    assert np.sum(mesh.cell_areas()) == pytest.approx(1.0, rel=1e-14)


def test_cook_quadrilateral_orientation():
    corners = [(0, 0), (48, 44), (48, 60), (0, 44)]
    mesh = m.create_structured(("quadrilateral", corners), 2)
    assert np.all(mesh.cell_signed_areas() > 0)


def test_interior_facets_have_two_cells():
    mesh = unit_square(4)
    interior = mesh.facet_cells[:, 1] >= 0
    assert np.all(mesh.facet_cells[interior, 0] >= 0)
    boundary = ~interior
    assert np.all(mesh.facet_cells[boundary, 0] >= 0)
    # boundary facets tagged Dirichlet by default, partitioning the boundary
    assert np.all(mesh.facet_tags[boundary] == m.DIRICHLET)
    assert np.all(mesh.facet_tags[interior] == m.INTERIOR)


def test_patch_interior_vertex():
    mesh = unit_square(4)
    # interior vertex of the structured mesh: pick the grid point (2, 2)
    vid = 2 * 5 + 2
    patch = m.build_patch(mesh, vid)
    assert patch.kind == "Internal"
    assert patch.closed
    assert len(patch.cells) == 6
    assert len(patch.internal_facets) == 6
    expected = np.flatnonzero(np.any(mesh.cells == vid, axis=1))
    assert set(patch.cells) == set(expected)


def test_patch_corner_vertex():
    mesh = unit_square(1)
    patch = m.build_patch(mesh, 0)  # corner (0,0)
    assert patch.kind == "DirichletBoundary"
    assert not patch.closed
    assert len(patch.cells) in (1, 2)


def test_patch_mixed_kind():
    def tagger(mid):
        return "dirichlet" if mid[0] < 0.5 else "neumann"

    mesh = unit_square(2, tagger=tagger)
    # vertex on the bottom edge at x=0.5 touches both tag regions
    vid = [i for i in range(mesh.n_vertices) if np.allclose(mesh.vertices[i], (0.5, 0.0))][0]
    patch = m.build_patch(mesh, vid)
    assert patch.kind == "Mixed"


def test_patch_cells_equal_incident_set():
    mesh = unit_square(3)
    for v in range(mesh.n_vertices):
        patch = m.build_patch(mesh, v)
        expected = set(np.flatnonzero(np.any(mesh.cells == v, axis=1)))
        assert set(patch.cells) == expected


def test_refine_empty_marked_is_identity():
    mesh = unit_square(2)
    out = m.refine_nvb(mesh, [])
    assert np.array_equal(out.cells, mesh.cells)
    assert np.array_equal(out.vertices, mesh.vertices)


def test_refine_single_cell_closure():
    # 2-cell square sharing the diagonal: both cells have the diagonal as
    # longest edge, so bisecting one forces closure of the other -> 4 cells
    mesh = unit_square(1)
    out = m.refine_nvb(mesh, [0])
    assert out.n_cells == 4
    assert np.sum(out.cell_areas()) == pytest.approx(1.0, rel=1e-12)


def test_refine_all_marked_preserves_area_and_conformity():
    mesh = unit_square(2)
    for _ in range(3):
        mesh = m.refine_nvb(mesh, range(mesh.n_cells))
        # conformity: every facet has one or two incident cells, every
        # interior facet exactly two
        counts = np.zeros(mesh.n_facets, dtype=int)
        for c in range(mesh.n_cells):
            for f in mesh.cell_facets[c]:
                counts[f] += 1
        assert set(counts) <= {1, 2}
        assert np.sum(mesh.cell_areas()) == pytest.approx(1.0, rel=1e-12)


def test_refine_shape_regularity():
    mesh = unit_square(2)
    floor = 0.5 * mesh.min_angle()
    rng = np.random.default_rng(0)
    for _ in range(6):
        marked = rng.choice(mesh.n_cells, size=max(1, mesh.n_cells // 5), replace=False)
        mesh = m.refine_nvb(mesh, marked)
    assert mesh.min_angle() >= floor - 1e-12


def test_refine_propagates_boundary_tags():
    def tagger(mid):
        return "neumann" if mid[1] < 1e-12 else "dirichlet"

    mesh = unit_square(2, tagger=tagger)
    out = m.refine_nvb(mesh, range(mesh.n_cells))
    for f in out.boundary_facets():
        mid = 0.5 * (out.vertices[out.facets[f, 0]] + out.vertices[out.facets[f, 1]])
        want = m.NEUMANN if mid[1] < 1e-12 else m.DIRICHLET
        assert out.facet_tags[f] == want


def test_split_low_valence_boundary():
    mesh = unit_square(2)
    out = m.split_low_valence_boundary(mesh)
    interior = out.facet_cells[:, 1] >= 0
    for v in range(out.n_vertices):
        patch = m.build_patch(out, v)
        assert np.sum(interior[patch.internal_facets]) >= 2


def test_vtk_export_roundtrip_cell_count(tmp_path):
    mesh = unit_square(2)
    path = tmp_path / "mesh.vtk"
    m.write_vtk(mesh, path, cell_data={"eta": np.arange(mesh.n_cells, dtype=float)})
    text = path.read_text()
    assert f"CELLS {mesh.n_cells}" in text
    assert "SCALARS eta double 1" in text
