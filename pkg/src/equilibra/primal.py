"""Primal solvers: Poisson with piecewise-constant conductivity and linear
elasticity, discretized with continuous Lagrange elements.

Conventions
-----------
Poisson: -div(kappa grad u) = f, u = g on the Dirichlet boundary and
kappa grad u . n = 0 on the Neumann boundary. The flux is
sigma = -kappa grad u.

Elasticity: div sigma(u) = -f with sigma(u) = 2 eps(u) + lam div(u) I,
u = 0 on the Dirichlet boundary and sigma . n = t on the Neumann part, so
the weak form reads (sigma(u), eps(v)) = (f, v) + (t, v)_Gamma_N.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from equilibra.mesh import DIRICHLET, NEUMANN, Mesh
from equilibra.quadrature import interval_rule, triangle_rule
from equilibra.spaces import DiscreteFunction, FunctionSpace


class PrimalError(RuntimeError):
    pass


def _as_cellwise(value, X):
    """Evaluate a scalar coefficient (constant or callable of physical
    coordinates) at points X of shape (nc, nq, 2)."""
    if callable(value):
        out = np.asarray(value(X), dtype=float)
        if out.shape != X.shape[:2]:
            out = np.broadcast_to(out, X.shape[:2])
        return out
    return np.full(X.shape[:2], float(value))


@dataclass
class PoissonProblem:
    """-div(kappa grad u) = f with mixed boundary conditions.

    kappa is a positive scalar or a callable of physical coordinates that is
    constant within each cell (it gets sampled at cell midpoints).
    """

    kappa: object = 1.0
    f: object = 0.0
    dirichlet: object = 0.0  # callable g(X) or constant, interpolated nodally

    def kappa_cells(self, mesh: Mesh) -> np.ndarray:
        mids = mesh.vertices[mesh.cells].mean(axis=1)
        if callable(self.kappa):
            vals = np.asarray(self.kappa(mids), dtype=float)
        else:
            vals = np.full(mesh.n_cells, float(self.kappa))
        if np.any(vals <= 0):
            raise PrimalError("conductivity must be positive")
        return vals


@dataclass
class ElasticityProblem:
    """Linear elasticity with stress sigma = 2 eps(u) + lam div(u) I,
    homogeneous Dirichlet data and traction t on the Neumann boundary."""

    lam: float = 1.0
    f: object = None          # callable X -> (..., 2) or constant 2-vector
    traction: object = None   # callable x -> 2-vector or constant 2-vector
    dirichlet: object = None  # callable x -> 2-vector; None means clamped

    def __post_init__(self):
        if self.lam <= 0:
            raise PrimalError("the Lame-type parameter must be positive")


@dataclass
class SparseSystem:
    """Symmetric sparse system with Dirichlet constraints handled by
    symmetric elimination."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    dirichlet_dofs: np.ndarray
    dirichlet_values: np.ndarray
    relative_residual: float = field(default=np.nan, init=False)

    def solve(self) -> np.ndarray:
        n = self.matrix.shape[0]
        free = np.ones(n, dtype=bool)
        free[self.dirichlet_dofs] = False
        if not np.any(~free):
            raise PrimalError("no Dirichlet constraints: system is singular")
        x = np.zeros(n)
        x[self.dirichlet_dofs] = self.dirichlet_values
        A = self.matrix
        b = self.rhs - A @ x
        Aff = A[free][:, free].tocsc()
        x[free] = spla.splu(Aff).solve(b[free])
        res = Aff @ x[free] - b[free]
        scale = max(np.linalg.norm(b[free]), 1e-30)
        self.relative_residual = np.linalg.norm(res) / scale
        return x


def _assemble(rows, cols, vals, n):
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def _dirichlet_scalar_dofs(space: FunctionSpace, tag=DIRICHLET):
    """Scalar Lagrange dofs located on boundary facets with the given tag."""
    mesh, k = space.mesh, space.degree
    facets = mesh.boundary_facets(tag)
    dofs = set()
    for f in facets:
        dofs.update(mesh.facets[f].tolist())
        for t in range(k - 1):
            dofs.add(mesh.n_vertices + f * (k - 1) + t)
    return np.array(sorted(dofs), dtype=np.int64)


def solve_poisson(mesh: Mesh, k: int, problem: PoissonProblem) -> DiscreteFunction:
    """Galerkin solution of the Poisson problem in continuous Lagrange(k)."""
    V = FunctionSpace(mesh, "Lagrange", k)
    pts, wts = triangle_rule(2 * k + 2)
    vals, grads = V.tabulation(pts)  # (nq, nd), (nq, nd, 2)
    geo = V.geometry
    JinvT = np.swapaxes(geo.Jinv, 1, 2)
    G = np.einsum("cij,qnj->cqni", JinvT, grads)  # physical gradients
    kap = problem.kappa_cells(mesh)
    Aloc = np.einsum("c,c,q,cqni,cqmi->cnm", kap, geo.detJ, wts, G, G)
    X = geo.map_points(pts)
    fvals = _as_cellwise(problem.f, X)
    bloc = np.einsum("c,q,qn,cq->cn", geo.detJ, wts, vals, fvals)

    nd = V.element.dim
    rows = np.repeat(V.dofmap, nd, axis=1).ravel()
    cols = np.tile(V.dofmap, (1, nd)).ravel()
    A = _assemble(rows, cols, Aloc.ravel(), V.ndofs)
    b = np.zeros(V.ndofs)
    np.add.at(b, V.dofmap.ravel(), bloc.ravel())

    ddofs = _dirichlet_scalar_dofs(V)
    if len(ddofs) == 0:
        raise PrimalError("Poisson problem requires a Dirichlet boundary")
    coords = V.dof_coordinates()[ddofs]
    if callable(problem.dirichlet):
        dvals = np.array([float(problem.dirichlet(x)) for x in coords])
    else:
        dvals = np.full(len(ddofs), float(problem.dirichlet))

    system = SparseSystem(A, b, ddofs, dvals)
    u = DiscreteFunction(V, system.solve())
    u.system = system
    return u


def solve_elasticity(mesh: Mesh, k: int, problem: ElasticityProblem) -> DiscreteFunction:
    """Galerkin solution of linear elasticity in vector Lagrange(k).

    Component blocking follows the vector FunctionSpace layout: dof of
    component c is c * n_scalar + scalar_dof.
    """
    V = FunctionSpace(mesh, "Lagrange", k, components=2)
    pts, wts = triangle_rule(2 * k + 2)
    vals, grads = V.tabulation(pts)
    geo = V.geometry
    JinvT = np.swapaxes(geo.Jinv, 1, 2)
    G = np.einsum("cij,qnj->cqni", JinvT, grads)
    w = wts[None, :] * geo.detJ[:, None]
    # scalar-gradient products; local dof (comp, node) with entries
    #   K[(a,n),(b,m)] = delta_ab (Gn . Gm) + Gn[b] Gm[a] + lam Gn[a] Gm[b]
    M1 = np.einsum("cq,cqni,cqmi->cnm", w, G, G)
    M2 = np.einsum("cq,cqna,cqmb->cnamb", w, G, G)
    nd = V.element.dim
    K = np.zeros((mesh.n_cells, 2, nd, 2, nd))
    for a in range(2):
        K[:, a, :, a, :] += M1
        for b in range(2):
            K[:, a, :, b, :] += M2[:, :, b, :, a]  # Gn[b] Gm[a]
            K[:, a, :, b, :] += problem.lam * M2[:, :, a, :, b]
    K = K.reshape(mesh.n_cells, 2 * nd, 2 * nd)

    # component-major local-to-global map
    L2G = np.concatenate([V.dofmap, V.n_scalar + V.dofmap], axis=1)  # (nc, 2nd)
    rows = np.repeat(L2G, 2 * nd, axis=1).ravel()
    cols = np.tile(L2G, (1, 2 * nd)).ravel()
    A = _assemble(rows, cols, K.ravel(), V.ndofs)

    b = np.zeros(V.ndofs)
    if problem.f is not None:
        X = geo.map_points(pts)
        fv = problem.f(X) if callable(problem.f) else np.broadcast_to(
            np.asarray(problem.f, dtype=float), X.shape
        )
        bloc = np.einsum("cq,qn,cqa->can", w, vals, np.asarray(fv))
        np.add.at(b, L2G.ravel(), bloc.reshape(mesh.n_cells, -1).ravel())

    if problem.traction is not None:
        _add_traction(b, V, problem.traction)

    ddofs_scalar = _dirichlet_scalar_dofs(FunctionSpace(mesh, "Lagrange", k))
    if len(ddofs_scalar) == 0:
        raise PrimalError("elasticity requires a Dirichlet boundary")
    ddofs = np.concatenate([ddofs_scalar, V.n_scalar + ddofs_scalar])
    if problem.dirichlet is None:
        dvals = np.zeros(len(ddofs))
    else:
        coords = FunctionSpace(mesh, "Lagrange", k).dof_coordinates()[ddofs_scalar]
        g = np.array([np.asarray(problem.dirichlet(x), dtype=float) for x in coords])
        dvals = np.concatenate([g[:, 0], g[:, 1]])
    system = SparseSystem(A, b, ddofs, dvals)
    u = DiscreteFunction(V, system.solve())
    u.system = system
    return u


def _add_traction(b, V: FunctionSpace, traction):
    """Accumulate the Neumann boundary term (t, v) for a vector space."""
    mesh, k = V.mesh, V.degree
    xq, wq = interval_rule(2 * k + 2)
    geo = V.geometry
    for f in mesh.boundary_facets(NEUMANN):
        c = mesh.facet_cells[f, 0]
        a_v, b_v = mesh.facets[f]
        pa, pb = mesh.vertices[a_v], mesh.vertices[b_v]
        pts = pa[None, :] + np.outer(xq, pb - pa)
        ref = np.einsum("ij,qj->qi", geo.Jinv[c], pts - geo.p0[c])
        vals, _ = V.tabulation(np.clip(ref, 0.0, 1.0))  # (nq, nd)
        if callable(traction):
            tv = np.array([np.asarray(traction(p), dtype=float) for p in pts])
        else:
            tv = np.broadcast_to(np.asarray(traction, dtype=float), (len(xq), 2))
        flen = mesh.facet_lengths[f]
        contrib = flen * np.einsum("q,qn,qa->an", wq, vals, tv)
        for a in range(2):
            np.add.at(b, a * V.n_scalar + V.dofmap[c], contrib[a])


class FluxEvaluator:
    """Cellwise evaluator of the Poisson flux -kappa grad u_h; plugs into
    project_l2 via eval_on_cells."""

    def __init__(self, u_h: DiscreteFunction, problem: PoissonProblem):
        self.u_h = u_h
        self.kappa = problem.kappa_cells(u_h.space.mesh)

    def eval_on_cells(self, pts_ref):
        g = self.u_h.grad_on_cells(pts_ref)
        return -self.kappa[:, None, None] * g


class StressEvaluator:
    """Cellwise evaluator of sigma(u_h) = 2 eps(u_h) + lam div(u_h) I.

    eval_on_cells returns the full tensor (nc, nq, 2, 2); row(i) gives a
    vector-valued view of row i for projection and equilibration.
    """

    def __init__(self, u_h: DiscreteFunction, problem: ElasticityProblem):
        self.u_h = u_h
        self.lam = problem.lam

    def eval_on_cells(self, pts_ref):
        g = self.u_h.grad_on_cells(pts_ref)  # (nc, nq, 2, 2)
        eps = 0.5 * (g + np.swapaxes(g, -1, -2))
        divu = g[..., 0, 0] + g[..., 1, 1]
        sig = 2.0 * eps
        sig[..., 0, 0] += self.lam * divu
        sig[..., 1, 1] += self.lam * divu
        return sig

    def row(self, i):
        return _StressRow(self, i)


class _StressRow:
    def __init__(self, parent, i):
        self.parent = parent
        self.i = i

    def eval_on_cells(self, pts_ref):
        return self.parent.eval_on_cells(pts_ref)[..., self.i, :]


def compute_flux(u_h: DiscreteFunction, problem):
    if isinstance(problem, PoissonProblem):
        return FluxEvaluator(u_h, problem)
    if isinstance(problem, ElasticityProblem):
        return StressEvaluator(u_h, problem)
    raise PrimalError(f"unsupported problem type {type(problem)!r}")
