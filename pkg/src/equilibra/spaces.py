"""Function spaces on triangular meshes: DOF maps, Piola transforms,
L2 projection and Raviart-Thomas interpolation.

DOF layouts
-----------
* Lagrange(k): vertex dofs, then (k-1) dofs per facet ordered along the
  ascending-vertex-id direction of the facet, then cell-interior dofs.
* DiscLagrange(q): cell-contiguous blocks.
* RT(m): m moment dofs per facet (degree 0..m-1, taken w.r.t. the global
  facet normal and direction), then cell-interior blocks. Shared facet
  dofs receive opposite orientation signs on the two incident cells,
  which makes the global functions H(div)-conforming.

Vector-valued Lagrange spaces store components block-wise: global dof of
component c is ``c * n_scalar + scalar_dof``.
"""

from dataclasses import dataclass

import numpy as np

from equilibra import elements as el
from equilibra.mesh import Mesh
from equilibra.quadrature import interval_rule, triangle_rule


class SpaceError(ValueError):
    pass


@dataclass
class CellGeometry:
    """Affine cell maps F(x̂) = p0 + J x̂ for every cell."""

    J: np.ndarray        # (nc, 2, 2)
    detJ: np.ndarray     # (nc,)
    Jinv: np.ndarray     # (nc, 2, 2)
    p0: np.ndarray       # (nc, 2)

    @classmethod
    def from_mesh(cls, mesh: Mesh):
        p = mesh.vertices[mesh.cells]
        J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)
        detJ = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        Jinv = np.empty_like(J)
        Jinv[:, 0, 0] = J[:, 1, 1]
        Jinv[:, 0, 1] = -J[:, 0, 1]
        Jinv[:, 1, 0] = -J[:, 1, 0]
        Jinv[:, 1, 1] = J[:, 0, 0]
        Jinv /= detJ[:, None, None]
        return cls(J=J, detJ=detJ, Jinv=Jinv, p0=p[:, 0])

    def map_points(self, pts_ref):
        """Physical coordinates of reference points -> (nc, nq, 2)."""
        return self.p0[:, None, :] + np.einsum("cij,qj->cqi", self.J, pts_ref)


class FunctionSpace:
    """A finite element space over a mesh.

    Parameters: family in {'Lagrange', 'DiscLagrange', 'RaviartThomasHier'},
    polynomial degree, and number of (blocked) components for Lagrange
    families.
    """

    def __init__(self, mesh: Mesh, family: str, degree: int, components: int = 1):
        self.mesh = mesh
        self.element = el.make_element(family, degree)
        self.family = family
        self.degree = degree
        self.components = components
        if family == "RaviartThomasHier" and components != 1:
            raise SpaceError("RT spaces are intrinsically vector valued")
        self.geometry = CellGeometry.from_mesh(mesh)
        self._build_dofmap()

    # -- dof maps -------------------------------------------------------

    def _build_dofmap(self):
        mesh, k = self.mesh, self.degree
        if self.family == "Lagrange":
            per_facet = k - 1
            per_cell = (k - 1) * (k - 2) // 2
            nv, nf, nc = mesh.n_vertices, mesh.n_facets, mesh.n_cells
            self.n_scalar = nv + nf * per_facet + nc * per_cell
            dofmap = np.empty((nc, self.element.dim), dtype=np.int64)
            dofmap[:, :3] = mesh.cells
            col = 3
            for j in range(3):  # local facet j, nodes along ascending local vertex order
                fids = mesh.cell_facets[:, j]
                a_loc, b_loc = el.REF_FACET_VERTICES[j]
                ga = mesh.cells[:, a_loc]
                flip = ga != mesh.facets[fids, 0]  # local direction vs global
                base = nv + fids * per_facet
                for t in range(per_facet):
                    tt = np.where(flip, per_facet - 1 - t, t)
                    dofmap[:, col] = base + tt
                    col += 1
            base = nv + nf * per_facet
            for t in range(per_cell):
                dofmap[:, col] = base + np.arange(nc) * per_cell + t
                col += 1
            self.dofmap = dofmap
            self.ndofs = self.n_scalar * self.components
        elif self.family == "DiscLagrange":
            nd = self.element.dim
            self.n_scalar = mesh.n_cells * nd
            self.dofmap = (
                np.arange(mesh.n_cells)[:, None] * nd + np.arange(nd)[None, :]
            )
            self.ndofs = self.n_scalar * self.components
        else:  # RaviartThomasHier
            m = self.degree
            n_int = self.element.dim - 3 * m
            nf, nc = self.mesh.n_facets, self.mesh.n_cells
            self.n_scalar = nf * m + nc * n_int
            dofmap = np.empty((nc, self.element.dim), dtype=np.int64)
            scale = np.ones((nc, self.element.dim))
            for j in range(3):
                fids = self.mesh.cell_facets[:, j]
                a_loc, b_loc = el.REF_FACET_VERTICES[j]
                ga = self.mesh.cells[:, a_loc]
                s_t = np.where(ga == self.mesh.facets[fids, 0], 1.0, -1.0)
                s_n = np.where(self.mesh.facet_cells[fids, 0] == np.arange(nc), 1.0, -1.0)
                flen = self.mesh.facet_lengths[fids]
                for t in range(m):
                    dofmap[:, j * m + t] = fids * m + t
                    scale[:, j * m + t] = s_n * (s_t**t) * flen / el.REF_FACET_LENGTHS[j]
            base = nf * m
            for t in range(n_int):
                dofmap[:, 3 * m + t] = base + np.arange(nc) * n_int + t
            self.dofmap = dofmap
            self.rt_scale = scale
            self.ndofs = self.n_scalar

    def cell_dofs(self, c):
        return self.dofmap[c]

    # -- tabulation helpers ----------------------------------------------

    def tabulation(self, pts_ref):
        """Reference tabulation (cached per point-set id is unnecessary:
        elements cache internally via coefficients; this is cheap)."""
        return self.element.tabulate(np.asarray(pts_ref))

    def dof_coordinates(self):
        """Physical coordinates of the scalar Lagrange dofs."""
        if self.family not in ("Lagrange", "DiscLagrange"):
            raise SpaceError("dof coordinates only defined for nodal spaces")
        nodes = self.element.nodes
        coords = np.zeros((self.n_scalar, 2))
        phys = self.geometry.map_points(nodes)
        for c in range(self.mesh.n_cells):
            coords[self.dofmap[c]] = phys[c]
        return coords


@dataclass
class DiscreteFunction:
    space: FunctionSpace
    coefficients: np.ndarray = None

    def __post_init__(self):
        if self.coefficients is None:
            self.coefficients = np.zeros(self.space.ndofs)
        if len(self.coefficients) != self.space.ndofs:
            raise SpaceError("coefficient length does not match ndofs")

    def copy(self):
        return DiscreteFunction(self.space, self.coefficients.copy())

    # -- cellwise evaluation ---------------------------------------------

    def local_coefficients(self):
        """Per-cell local coefficient array (nc, ndof_local[, ncomp])."""
        sp = self.space
        if sp.family == "RaviartThomasHier":
            return self.coefficients[sp.dofmap] * sp.rt_scale
        if sp.components == 1:
            return self.coefficients[sp.dofmap]
        locs = [
            self.coefficients[i * sp.n_scalar + sp.dofmap] for i in range(sp.components)
        ]
        return np.stack(locs, axis=-1)

    def eval_on_cells(self, pts_ref):
        """Values at mapped reference points for every cell.

        Returns (nc, nq) for scalar spaces, (nc, nq, 2) for vector Lagrange
        and RT spaces.
        """
        sp = self.space
        pts_ref = np.asarray(pts_ref)
        loc = self.local_coefficients()
        if sp.family == "RaviartThomasHier":
            vals_ref, _ = sp.tabulation(pts_ref)  # (nq, nd, 2)
            v = np.einsum("cn,qnd->cqd", loc, vals_ref)
            return np.einsum("cij,cqj->cqi", sp.geometry.J, v) / sp.geometry.detJ[:, None, None]
        vals_ref, _ = sp.tabulation(pts_ref)  # (nq, nd)
        if sp.components == 1:
            return np.einsum("cn,qn->cq", loc, vals_ref)
        return np.einsum("cnk,qn->cqk", loc, vals_ref)

    def grad_on_cells(self, pts_ref):
        """Physical gradients: (nc, nq, 2) scalar or (nc, nq, 2, 2) vector
        with grad[c, q, i, j] = d u_i / d x_j."""
        sp = self.space
        _, grads_ref = sp.tabulation(np.asarray(pts_ref))  # (nq, nd, 2)
        loc = self.local_coefficients()
        JinvT = np.swapaxes(sp.geometry.Jinv, 1, 2)
        if sp.family == "RaviartThomasHier":
            raise SpaceError("use div_on_cells for RT functions")
        if sp.components == 1:
            g = np.einsum("cn,qnd->cqd", loc, grads_ref)
            return np.einsum("cij,cqj->cqi", JinvT, g)
        g = np.einsum("cnk,qnd->cqkd", loc, grads_ref)
        return np.einsum("cij,cqkj->cqki", JinvT, g)

    def div_on_cells(self, pts_ref):
        """Divergence of an RT function at mapped points -> (nc, nq)."""
        sp = self.space
        if sp.family != "RaviartThomasHier":
            raise SpaceError("div_on_cells requires an RT space")
        _, divs_ref = sp.tabulation(np.asarray(pts_ref))
        loc = self.local_coefficients()
        return np.einsum("cn,qn->cq", loc, divs_ref) / sp.geometry.detJ[:, None]


def _evaluate_integrand(f, space, pts_ref, ncomp):
    """Evaluate a callable / DiscreteFunction on all cells -> (nc, nq[, ncomp])."""
    if isinstance(f, DiscreteFunction):
        return f.eval_on_cells(pts_ref)
    if hasattr(f, "eval_on_cells"):
        return f.eval_on_cells(pts_ref)
    X = space.geometry.map_points(pts_ref)  # (nc, nq, 2)
    out = np.asarray(f(X))
    want = X.shape[:2] if ncomp == 1 else X.shape[:2] + (ncomp,)
    if out.shape == want:
        return out
    # pointwise fallback
    nc, nq = X.shape[:2]
    out = np.empty(want)
    for c in range(nc):
        for q in range(nq):
            out[c, q] = f(X[c, q])
    return out


def project_l2(target_space: FunctionSpace, integrand) -> DiscreteFunction:
    """Cell-local L2 projection into a discontinuous Lagrange space.

    Reproduces polynomials up to the target degree exactly; `integrand`
    may be a callable of physical coordinates, a DiscreteFunction or any
    object with `eval_on_cells`.
    """
    sp = target_space
    if sp.family != "DiscLagrange":
        raise SpaceError("project_l2 targets discontinuous Lagrange spaces")
    deg = 2 * max(sp.degree, 2) + 2
    pts, wts = triangle_rule(deg)
    vals, _ = sp.tabulation(pts)  # (nq, nd)
    Mref = np.einsum("q,qi,qj->ij", wts, vals, vals)  # detJ cancels in solve
    Minv = np.linalg.inv(Mref)
    fvals = _evaluate_integrand(integrand, sp, pts, sp.components)
    out = DiscreteFunction(sp)
    if sp.components == 1:
        rhs = np.einsum("q,qi,cq->ci", wts, vals, fvals)
        coefs = rhs @ Minv.T
        out.coefficients[sp.dofmap.ravel()] = coefs.ravel()
    else:
        rhs = np.einsum("q,qi,cqk->cik", wts, vals, fvals)
        coefs = np.einsum("ij,cjk->cik", Minv, rhs)
        for k in range(sp.components):
            out.coefficients[k * sp.n_scalar + sp.dofmap.ravel()] = coefs[:, :, k].ravel()
    return out


def interpolate_rt(space: FunctionSpace, field) -> DiscreteFunction:
    """Interpolate a vector field into an RT space by its DOF functionals.

    `field` is a callable of physical coordinates returning a 2-vector, or
    a DiscreteFunction (RT or vector DG). Fields already in the RT space
    round-trip exactly.
    """
    if space.family != "RaviartThomasHier":
        raise SpaceError("interpolate_rt requires an RT space")
    mesh, m = space.mesh, space.degree
    elem = space.element
    geo = space.geometry
    out = DiscreteFunction(space)

    if isinstance(field, DiscreteFunction):
        raise SpaceError("interpolate_rt expects a callable of physical coordinates")

    def field_at(x):
        x = np.asarray(x, dtype=float)
        return np.asarray(field(x), dtype=float)

    # facet dofs: Legendre moments of the normal trace along the global
    # facet direction
    xq, wq = interval_rule(4 * m + 2)
    leg = np.array([el.shifted_legendre(j)(xq) for j in range(m)])  # (m, nq)
    for f in range(mesh.n_facets):
        a = mesh.vertices[mesh.facets[f, 0]]
        b = mesh.vertices[mesh.facets[f, 1]]
        pts = a[None, :] + np.outer(xq, b - a)
        nvals = np.array([field_at(p) for p in pts]) @ mesh.facet_normals[f]
        for j in range(m):
            out.coefficients[f * m + j] = (2 * j + 1) * np.sum(wq * nvals * leg[j])

    # interior dofs: local functionals of the Piola pullback
    n_int = elem.dim - 3 * m
    if n_int > 0:
        base = mesh.n_facets * m
        for c in range(mesh.n_cells):
            J, Jinv, p0, dJ = geo.J[c], geo.Jinv[c], geo.p0[c], geo.detJ[c]

            def pullback(xhat):
                return dJ * (Jinv @ field_at(p0 + J @ xhat))

            loc = elem.dof_functionals(pullback)
            out.coefficients[base + c * n_int : base + (c + 1) * n_int] = loc[3 * m :]
    return out
