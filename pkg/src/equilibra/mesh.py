"""Conforming triangular meshes: adjacency, boundary tags, vertex patches
and newest-vertex-bisection refinement.

Conventions
-----------
* cells are counter-clockwise triples of vertex ids
* local facet ``j`` of a cell is the edge opposite local vertex ``j``
* global facets store their vertex pair sorted ascending; the global facet
  normal points out of the lower-id incident cell (outward on the boundary)
* ``refinement_edge[c]`` is the local facet index bisected by NVB
"""

from dataclasses import dataclass, field

import numpy as np

INTERIOR = 0
DIRICHLET = 1
NEUMANN = 2

_TAG_NAMES = {INTERIOR: "interior", DIRICHLET: "dirichlet", NEUMANN: "neumann"}


class MeshError(ValueError):
    """Raised for malformed mesh input."""


@dataclass
class Mesh:
    vertices: np.ndarray          # (nv, 2)
    cells: np.ndarray             # (nc, 3) CCW
    facets: np.ndarray            # (nf, 2) sorted vertex pairs
    cell_facets: np.ndarray       # (nc, 3) global facet id of local facet j
    facet_cells: np.ndarray       # (nf, 2) incident cells, -1 if boundary
    facet_tags: np.ndarray        # (nf,)
    refinement_edge: np.ndarray   # (nc,)
    facet_normals: np.ndarray = field(default=None, repr=False)   # (nf, 2)
    facet_lengths: np.ndarray = field(default=None, repr=False)   # (nf,)

    def __post_init__(self):
        if self.facet_normals is None:
            self._compute_facet_geometry()

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def n_facets(self):
        return len(self.facets)

    def _compute_facet_geometry(self):
        tang = self.vertices[self.facets[:, 1]] - self.vertices[self.facets[:, 0]]
        self.facet_lengths = np.linalg.norm(tang, axis=1)
        # candidate normal: tangent rotated by -90 degrees
        n = np.column_stack([tang[:, 1], -tang[:, 0]]) / self.facet_lengths[:, None]
        # flip so the normal points out of the lower-id incident cell
        c0 = self.facet_cells[:, 0]
        centroids = self.vertices[self.cells[c0]].mean(axis=1)
        mid = 0.5 * (self.vertices[self.facets[:, 0]] + self.vertices[self.facets[:, 1]])
        flip = np.einsum("ij,ij->i", n, mid - centroids) < 0
        n[flip] *= -1.0
        self.facet_normals = n

    def cell_areas(self):
        p = self.vertices[self.cells]
        return 0.5 * np.abs(
            (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
            - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
        )

    def cell_signed_areas(self):
        p = self.vertices[self.cells]
        return 0.5 * (
            (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
            - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
        )

    def cell_diameters(self):
        p = self.vertices[self.cells]
        e = np.stack(
            [
                np.linalg.norm(p[:, 1] - p[:, 2], axis=1),
                np.linalg.norm(p[:, 2] - p[:, 0], axis=1),
                np.linalg.norm(p[:, 0] - p[:, 1], axis=1),
            ],
            axis=1,
        )
        return e.max(axis=1)

    def min_angle(self):
        """Smallest interior angle over all cells (radians)."""
        p = self.vertices[self.cells]
        angles = []
        for i in range(3):
            a = p[:, (i + 1) % 3] - p[:, i]
            b = p[:, (i + 2) % 3] - p[:, i]
            cosang = np.einsum("ij,ij->i", a, b) / (
                np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
            )
            angles.append(np.arccos(np.clip(cosang, -1.0, 1.0)))
        return float(np.min(angles))

    def boundary_facets(self, tag=None):
        mask = self.facet_cells[:, 1] < 0
        if tag is not None:
            mask &= self.facet_tags == tag
        return np.flatnonzero(mask)

    def retag_boundary(self, tagger):
        """Re-assign Dirichlet/Neumann tags from a geometric predicate.

        `tagger(midpoint) -> 'dirichlet' | 'neumann'` is evaluated at every
        boundary facet midpoint.
        """
        for f in self.boundary_facets():
            mid = 0.5 * (self.vertices[self.facets[f, 0]] + self.vertices[self.facets[f, 1]])
            kind = tagger(mid)
            if kind not in ("dirichlet", "neumann"):
                raise MeshError(f"tagger returned {kind!r}")
            self.facet_tags[f] = DIRICHLET if kind == "dirichlet" else NEUMANN


@dataclass
class Patch:
    """Support of the nodal hat function of `center_vertex`.

    `cells` is the CCW-ordered ring (closed) or fan (open, boundary patch);
    `internal_facets[i]` is the facet incident to the center shared by
    `cells[i-1]` and `cells[i]`; for open fans, `boundary_facets` are the
    two center-incident facets on the domain boundary (first and last in
    walk order).
    """

    center_vertex: int
    cells: np.ndarray
    internal_facets: np.ndarray
    kind: str                       # Internal | DirichletBoundary | NeumannBoundary | Mixed
    closed: bool
    boundary_facets: np.ndarray     # center-incident boundary facets (empty if closed)
    local_center: np.ndarray        # local index of center vertex in each cell


def _build_connectivity(vertices, cells):
    """Facet arrays from a CCW cell array."""
    nc = len(cells)
    # local facet j of cell c: (cells[c, j+1], cells[c, j+2]) mod 3
    pairs = np.stack(
        [cells[:, [1, 2]], cells[:, [2, 0]], cells[:, [0, 1]]], axis=1
    ).reshape(-1, 2)
    sorted_pairs = np.sort(pairs, axis=1)
    facets, inverse = np.unique(sorted_pairs, axis=0, return_inverse=True)
    cell_facets = inverse.reshape(nc, 3)
    facet_cells = -np.ones((len(facets), 2), dtype=np.int64)
    for c in range(nc):
        for j in range(3):
            f = cell_facets[c, j]
            if facet_cells[f, 0] < 0:
                facet_cells[f, 0] = c
            elif facet_cells[f, 1] < 0:
                facet_cells[f, 1] = c
            else:
                raise MeshError(f"facet {f} has more than two incident cells")
    return facets, cell_facets, facet_cells


def _make_mesh(vertices, cells, tagger=None, refinement_edge=None):
    vertices = np.asarray(vertices, dtype=float)
    cells = np.asarray(cells, dtype=np.int64)
    # enforce CCW orientation
    p = vertices[cells]
    signed = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (
        p[:, 2, 0] - p[:, 0, 0]
    ) * (p[:, 1, 1] - p[:, 0, 1])
    if np.any(signed == 0):
        raise MeshError("degenerate cell (zero area)")
    flip = signed < 0
    cells[flip] = cells[flip][:, [0, 2, 1]]

    facets, cell_facets, facet_cells = _build_connectivity(vertices, cells)
    tags = np.full(len(facets), INTERIOR, dtype=np.int64)
    boundary = facet_cells[:, 1] < 0
    tags[boundary] = DIRICHLET

    if refinement_edge is None:
        # longest-edge initialization on the coarse mesh
        pp = vertices[cells]
        e = np.stack(
            [
                np.linalg.norm(pp[:, 1] - pp[:, 2], axis=1),
                np.linalg.norm(pp[:, 2] - pp[:, 0], axis=1),
                np.linalg.norm(pp[:, 0] - pp[:, 1], axis=1),
            ],
            axis=1,
        )
        refinement_edge = np.argmax(e, axis=1).astype(np.int64)

    mesh = Mesh(
        vertices=vertices,
        cells=cells,
        facets=facets,
        cell_facets=cell_facets,
        facet_cells=facet_cells,
        facet_tags=tags,
        refinement_edge=np.asarray(refinement_edge, dtype=np.int64),
    )
    if tagger is not None:
        mesh.retag_boundary(tagger)
    return mesh


def _bilinear(corners, s, t):
    c = np.asarray(corners, dtype=float)
    return (
        np.outer((1 - s) * (1 - t), c[0])
        + np.outer(s * (1 - t), c[1])
        + np.outer(s * t, c[2])
        + np.outer((1 - s) * t, c[3])
    )


def create_structured(domain, resolution, tagger=None):
    """Structured triangulation of a rectangle or convex quadrilateral.

    `domain` is either `("rectangle", (x0, y0, x1, y1))` or
    `("quadrilateral", corners)` with four CCW corners. Each grid square
    is split along its lower-left/upper-right diagonal, giving
    `2 * resolution**2` cells and `(resolution + 1)**2` vertices.
    Boundary facets are tagged by `tagger` (default: all Dirichlet).
    """
    if resolution < 1:
        raise MeshError("resolution must be >= 1")
    n = int(resolution)
    s = np.linspace(0.0, 1.0, n + 1)
    S, T = np.meshgrid(s, s, indexing="ij")
    kind, data = domain
    if kind == "rectangle":
        x0, y0, x1, y1 = data
        if x1 <= x0 or y1 <= y0:
            raise MeshError("degenerate rectangle")
        verts = np.column_stack([x0 + (x1 - x0) * S.ravel(), y0 + (y1 - y0) * T.ravel()])
    elif kind == "quadrilateral":
        verts = _bilinear(data, S.ravel(), T.ravel())
    else:
        raise MeshError(f"unknown domain kind {kind!r}")

    def vid(i, j):
        return i * (n + 1) + j

    cells = []
    for i in range(n):
        for j in range(n):
            a, b = vid(i, j), vid(i + 1, j)
            c, d = vid(i + 1, j + 1), vid(i, j + 1)
            cells.append((a, b, c))
            cells.append((a, c, d))
    return _make_mesh(verts, np.array(cells), tagger=tagger)


def build_patch(mesh: Mesh, vertex_id: int) -> Patch:
    """Ordered cell ring/fan around a vertex and its classification."""
    if vertex_id < 0 or vertex_id >= mesh.n_vertices:
        raise MeshError(f"invalid vertex id {vertex_id}")
    incident = np.flatnonzero(np.any(mesh.cells == vertex_id, axis=1))
    if len(incident) == 0:
        raise MeshError(f"vertex {vertex_id} is isolated")

    # center-incident facets per incident cell, in CCW walk order
    # within cell (v0,v1,v2) CCW with z = v_i: entering facet (z, v_{i+1}),
    # leaving facet (z, v_{i+2})
    enter = {}
    leave = {}
    for c in incident:
        i = int(np.flatnonzero(mesh.cells[c] == vertex_id)[0])
        f_enter = mesh.cell_facets[c, (i + 2) % 3]  # facet (z, v_{i+1})
        f_leave = mesh.cell_facets[c, (i + 1) % 3]  # facet (z, v_{i+2})
        enter[f_enter] = c
        leave[c] = f_leave

    z_facets = set(enter)
    z_facets.update(leave.values())
    boundary_z = [f for f in z_facets if mesh.facet_cells[f, 1] < 0]

    if boundary_z:
        # open fan: start at the boundary facet that is an entering facet
        starts = [f for f in boundary_z if f in enter]
        if len(starts) != 1 or len(boundary_z) != 2:
            raise MeshError(f"non-manifold boundary at vertex {vertex_id}")
        start = starts[0]
        closed = False
    else:
        start = min(enter)
        closed = True

    cells_ordered = []
    internal = []
    f = start
    while True:
        c = enter[f]
        cells_ordered.append(c)
        if not closed:
            internal.append(f)
        else:
            internal.append(f)
        f = leave[c]
        if closed and f == start:
            break
        if not closed and mesh.facet_cells[f, 1] < 0:
            break
        if len(cells_ordered) > len(incident):
            raise MeshError(f"patch walk failed at vertex {vertex_id}")
    if len(cells_ordered) != len(incident):
        raise MeshError(f"patch around vertex {vertex_id} is not contiguous")

    if closed:
        bnd = np.array([], dtype=np.int64)
        kind = "Internal"
        # internal facets: drop the duplicate start listing convention: the
        # walk lists the entering facet of each cell; for a closed ring that
        # is exactly the set of center facets
        internal_facets = np.array(internal, dtype=np.int64)
    else:
        bnd = np.array([start, leave[cells_ordered[-1]]], dtype=np.int64)
        internal_facets = np.array(internal[1:], dtype=np.int64)
        tags = set(int(mesh.facet_tags[f]) for f in bnd)
        if tags == {DIRICHLET}:
            kind = "DirichletBoundary"
        elif tags == {NEUMANN}:
            kind = "NeumannBoundary"
        else:
            kind = "Mixed"

    cells_arr = np.array(cells_ordered, dtype=np.int64)
    local_center = np.array(
        [int(np.flatnonzero(mesh.cells[c] == vertex_id)[0]) for c in cells_arr],
        dtype=np.int64,
    )
    return Patch(
        center_vertex=vertex_id,
        cells=cells_arr,
        internal_facets=internal_facets,
        kind=kind,
        closed=closed,
        boundary_facets=bnd,
        local_center=local_center,
    )


def refine_nvb(mesh: Mesh, marked) -> Mesh:
    """Newest-vertex bisection of `marked` cells with conforming closure.

    Returns a new mesh; the input is left untouched. An empty marked set
    returns an identical copy.
    """
    marked = np.asarray(sorted(set(int(c) for c in marked)), dtype=np.int64)
    if np.any(marked < 0) or np.any(marked >= mesh.n_cells):
        raise MeshError("marked set contains invalid cell ids")
    if len(marked) == 0:
        return Mesh(
            vertices=mesh.vertices.copy(),
            cells=mesh.cells.copy(),
            facets=mesh.facets.copy(),
            cell_facets=mesh.cell_facets.copy(),
            facet_cells=mesh.facet_cells.copy(),
            facet_tags=mesh.facet_tags.copy(),
            refinement_edge=mesh.refinement_edge.copy(),
        )

    ref_facet = mesh.cell_facets[np.arange(mesh.n_cells), mesh.refinement_edge]

    # closure: a cell with any marked facet must have its refinement edge marked
    facet_marked = np.zeros(mesh.n_facets, dtype=bool)
    facet_marked[ref_facet[marked]] = True
    while True:
        cell_has_marked = facet_marked[mesh.cell_facets].any(axis=1)
        need = cell_has_marked & ~facet_marked[ref_facet]
        if not need.any():
            break
        facet_marked[ref_facet[need]] = True

    # midpoints of marked facets
    new_vertex = -np.ones(mesh.n_facets, dtype=np.int64)
    marked_facets = np.flatnonzero(facet_marked)
    mids = 0.5 * (
        mesh.vertices[mesh.facets[marked_facets, 0]]
        + mesh.vertices[mesh.facets[marked_facets, 1]]
    )
    new_vertex[marked_facets] = mesh.n_vertices + np.arange(len(marked_facets))
    vertices = np.vstack([mesh.vertices, mids])

    new_cells = []
    new_ref = []

    def emit(tri, ref_local):
        new_cells.append(tri)
        new_ref.append(ref_local)

    def bisect(tri, facet_of):
        """Bisect `tri` = (peak, e1, e2) at its refinement edge (e1, e2).

        `facet_of` maps an unordered vertex pair to the marked-midpoint
        vertex (or -1). Children are (m, peak, e1) and (m, e2, peak) with
        refinement edge opposite the new vertex (local index 0).
        """
        p, a, b = tri
        m = facet_of(a, b)
        for child in ((m, p, a), (m, b, p)):
            _, ca, cb = child
            if facet_of(ca, cb) >= 0:
                bisect(child, facet_of)
            else:
                emit(child, 0)

    facet_lookup = {}
    for f in marked_facets:
        key = (int(mesh.facets[f, 0]), int(mesh.facets[f, 1]))
        facet_lookup[key] = int(new_vertex[f])

    def facet_of(a, b):
        return facet_lookup.get((min(a, b), max(a, b)), -1)

    for c in range(mesh.n_cells):
        r = int(mesh.refinement_edge[c])
        tri = (
            int(mesh.cells[c, r]),
            int(mesh.cells[c, (r + 1) % 3]),
            int(mesh.cells[c, (r + 2) % 3]),
        )
        if facet_marked[ref_facet[c]]:
            bisect(tri, facet_of)
        else:
            emit(tri, 0)  # tri reordered peak-first, refinement edge opposite 0

    cells = np.array(new_cells, dtype=np.int64)
    refined = _make_mesh(vertices, cells, refinement_edge=np.array(new_ref))

    # propagate boundary tags: a boundary facet of the fine mesh lies inside
    # exactly one coarse boundary facet; match by midpoint via parent lookup
    _propagate_tags(mesh, refined)
    return refined


def _propagate_tags(coarse: Mesh, fine: Mesh):
    bnd = fine.boundary_facets()
    mids = 0.5 * (fine.vertices[fine.facets[bnd, 0]] + fine.vertices[fine.facets[bnd, 1]])
    cb = coarse.boundary_facets()
    a = coarse.vertices[coarse.facets[cb, 0]]
    b = coarse.vertices[coarse.facets[cb, 1]]
    ab = b - a
    lens2 = np.einsum("ij,ij->i", ab, ab)
    for idx, (f, m) in enumerate(zip(bnd, mids)):
        # find the coarse boundary facet containing this midpoint
        t = np.einsum("ij,ij->i", m[None, :] - a, ab) / lens2
        proj = a + t[:, None] * ab
        d = np.linalg.norm(proj - m[None, :], axis=1)
        ok = (t > -1e-10) & (t < 1 + 1e-10)
        d[~ok] = np.inf
        parent = cb[int(np.argmin(d))]
        fine.facet_tags[f] = coarse.facet_tags[parent]


def split_low_valence_boundary(mesh: Mesh, min_interior_facets: int = 2) -> Mesh:
    """Split cells at their barycenter until every vertex patch has at least
    `min_interior_facets` center-incident interior facets.

    Needed by the weak-symmetry equilibration, which is singular on patches
    with fewer than two internal facets.
    """
    current = mesh
    for _ in range(4):
        bad = []
        interior = current.facet_cells[:, 1] >= 0
        for v in range(current.n_vertices):
            patch = build_patch(current, v)
            count = int(np.sum(interior[patch.internal_facets]))
            if count < min_interior_facets:
                bad.extend(int(c) for c in patch.cells)
        if not bad:
            return current
        current = _barycenter_split(current, sorted(set(bad)))
    raise MeshError("could not satisfy the patch interior-facet condition")


def _barycenter_split(mesh: Mesh, cells_to_split):
    verts = [mesh.vertices]
    cells = []
    split = set(cells_to_split)
    next_vid = mesh.n_vertices
    newv = []
    for c in range(mesh.n_cells):
        tri = mesh.cells[c]
        if c in split:
            newv.append(mesh.vertices[tri].mean(axis=0))
            m = next_vid
            next_vid += 1
            cells.extend([(tri[0], tri[1], m), (tri[1], tri[2], m), (tri[2], tri[0], m)])
        else:
            cells.append(tuple(tri))
    vertices = np.vstack([mesh.vertices] + ([np.array(newv)] if newv else []))
    fine = _make_mesh(vertices, np.array(cells, dtype=np.int64))
    _propagate_tags(mesh, fine)
    return fine


def write_vtk(mesh: Mesh, path, cell_data=None):
    """Write the mesh (and optional per-cell scalar fields) as legacy ASCII VTK."""
    cell_data = cell_data or {}
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nequilibra mesh\nASCII\n")
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_vertices} double\n")
        for x, y in mesh.vertices:
            fh.write(f"{x!r} {y!r} 0.0\n")
        fh.write(f"CELLS {mesh.n_cells} {4 * mesh.n_cells}\n")
        for tri in mesh.cells:
            fh.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n")
        fh.write(f"CELL_TYPES {mesh.n_cells}\n")
        fh.write("5\n" * mesh.n_cells)
        if cell_data:
            fh.write(f"CELL_DATA {mesh.n_cells}\n")
            for name, values in cell_data.items():
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                for v in np.asarray(values, dtype=float):
                    fh.write(f"{v!r}\n")
