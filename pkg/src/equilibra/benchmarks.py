"""Benchmark problem definitions.

Two problems drive the adaptive pipeline end to end:

* a diffusion problem on (-1, 1)^2 with a checkerboard coefficient (kappa1 on
  the quadrants where x*y > 0, 1 elsewhere) and the singular exact solution
  u = r^alpha (a_i cos(alpha theta) + b_i sin(alpha theta));
* Cook's membrane: the tapered panel with corners (0,0), (48,44), (48,60),
  (0,44), clamped on x = 0 and loaded by a vertical traction t = (0, 0.03)
  on x = 48.

Both classes implement the problem protocol of `adaptivity.adaptive_loop`.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from equilibra import mesh as msh
from equilibra import primal
from equilibra.equilibration import equilibrate
from equilibra.estimation import (
    estimate_elasticity,
    estimate_heuristic,
    estimate_poisson,
    true_error,
)
from equilibra.quadrature import triangle_rule
from equilibra.spaces import FunctionSpace, project_l2


class BenchmarkError(RuntimeError):
    pass


# --- checkerboard exact solution ------------------------------------------------


def _transfer_matrix(alpha, kappas):
    """Propagate the angular state (mu, mu'/alpha) once around the origin."""
    c, s = np.cos(alpha * np.pi / 2.0), np.sin(alpha * np.pi / 2.0)
    rot = np.array([[c, s], [-s, c]])
    T = np.eye(2)
    n = len(kappas)
    for i in range(n):
        jump = np.array([[1.0, 0.0], [0.0, kappas[i] / kappas[(i + 1) % n]]])
        T = jump @ rot @ T
    return T


def quadrant_exact_solution(kappa1: float):
    """Singular exponent and per-quadrant angular coefficients for the
    checkerboard diffusion problem.

    Returns (alpha, coeffs, u_ext, grad_ext) where coeffs[i] = (a_i, b_i)
    gives mu_i(theta) = a_i cos(alpha theta) + b_i sin(alpha theta) on
    quadrant i (theta in [i pi/2, (i+1) pi/2)).
    """
    if kappa1 <= 0:
        raise BenchmarkError("kappa1 must be positive")
    if abs(kappa1 - 1.0) < 1e-12:
        raise BenchmarkError(
            "kappa1 = 1 has no interface singularity; nothing to compute"
        )
    kappas = np.array([kappa1, 1.0, kappa1, 1.0])

    def det(alpha):
        return np.linalg.det(_transfer_matrix(alpha, kappas) - np.eye(2))

    # locate the smallest sign change of det(T - I) in (0, 1) and bisect
    grid = np.linspace(1e-6, 1.0 - 1e-9, 2001)
    vals = np.array([det(a) for a in grid])
    sign_change = np.flatnonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0)
    if len(sign_change) == 0:
        raise BenchmarkError("no singular exponent in (0, 1) for this kappa")
    lo, hi = grid[sign_change[0]], grid[sign_change[0] + 1]
    while hi - lo > 1e-13:
        mid = 0.5 * (lo + hi)
        if det(lo) * det(mid) <= 0:
            hi = mid
        else:
            lo = mid
    alpha = 0.5 * (lo + hi)

    # state at theta = 0 from the null vector of T - I
    T = _transfer_matrix(alpha, kappas)
    _, _, vt = np.linalg.svd(T - np.eye(2))
    state = vt[-1]
    if abs(state[0]) > 1e-14 and state[0] < 0:
        state = -state

    # propagate around and express each quadrant in global angle
    coeffs = []
    c, s = np.cos(alpha * np.pi / 2.0), np.sin(alpha * np.pi / 2.0)
    rot = np.array([[c, s], [-s, c]])
    for i in range(4):
        theta0 = i * np.pi / 2.0
        A, B = state  # local: mu = A cos(alpha (th-th0)) + B sin(...)
        c0, s0 = np.cos(alpha * theta0), np.sin(alpha * theta0)
        coeffs.append((A * c0 - B * s0, A * s0 + B * c0))
        state = rot @ state
        state = np.array(
            [state[0], state[1] * kappas[i] / kappas[(i + 1) % 4]]
        )
    coeffs = np.asarray(coeffs)
    ab = np.abs(coeffs).max()
    coeffs = coeffs / ab

    a = coeffs[:, 0]
    b = coeffs[:, 1]

    def _polar(X):
        X = np.asarray(X, dtype=float)
        x, y = X[..., 0], X[..., 1]
        r = np.hypot(x, y)
        th = np.mod(np.arctan2(y, x), 2.0 * np.pi)
        quad = np.minimum((th / (np.pi / 2.0)).astype(int), 3)
        return r, th, quad

    def u_ext(X):
        r, th, quad = _polar(X)
        mu = a[quad] * np.cos(alpha * th) + b[quad] * np.sin(alpha * th)
        return np.where(r > 0, r**alpha * mu, 0.0)

    def grad_ext(X):
        r, th, quad = _polar(X)
        cs, sn = np.cos(alpha * th), np.sin(alpha * th)
        mu = a[quad] * cs + b[quad] * sn
        dmu = alpha * (-a[quad] * sn + b[quad] * cs)
        rad = np.where(r > 0, r ** (alpha - 1.0), 0.0)
        ct, st = np.cos(th), np.sin(th)
        gx = rad * (alpha * mu * ct - dmu * st)
        gy = rad * (alpha * mu * st + dmu * ct)
        return np.stack([gx, gy], axis=-1)

    return alpha, coeffs, u_ext, grad_ext


@dataclass
class QuadrantProblem:
    """Checkerboard diffusion benchmark with the exact singular solution as
    Dirichlet data on the whole boundary of (-1, 1)^2."""

    kappa1: float = 5.0
    n0: int = 4
    sweeps: int = 25
    workers: int = 1

    def __post_init__(self):
        self.alpha, self.coeffs, self.u_ext, self.grad_ext = (
            quadrant_exact_solution(self.kappa1)
        )

        def kappa(X):
            X = np.asarray(X, dtype=float)
            return np.where(X[..., 0] * X[..., 1] > 0, self.kappa1, 1.0)

        self.kappa = kappa
        self.prob = primal.PoissonProblem(
            kappa=kappa, f=0.0, dirichlet=lambda x: float(self.u_ext(x))
        )

    def initial_mesh(self):
        return msh.create_structured(
            ("rectangle", (-1.0, -1.0, 1.0, 1.0)), self.n0
        )

    def solve(self, mesh, k):
        return primal.solve_poisson(mesh, k, self.prob)

    def reconstruct(self, mesh, u_h, m, weak_symmetry=False):
        if weak_symmetry:
            raise BenchmarkError("weak symmetry applies to elasticity only")
        flux = primal.compute_flux(u_h, self.prob)
        W = FunctionSpace(mesh, "DiscLagrange", m - 1, components=2)
        return equilibrate(
            mesh,
            [project_l2(W, flux)],
            [None],  # f = 0
            m,
            primal_degree=u_h.space.degree,
            weights=1.0 / self.prob.kappa_cells(mesh),
            sweeps=self.sweeps,
            workers=self.workers,
        )

    def estimate(self, u_h, field_r, config):
        return estimate_poisson(u_h, field_r, self.prob, config.constants)

    def error(self, u_h):
        return true_error(u_h, self.grad_ext, self.prob)


# --- Cook's membrane ---------------------------------------------------------------

COOK_CORNERS = [(0.0, 0.0), (48.0, 44.0), (48.0, 60.0), (0.0, 44.0)]


def cook_traction_factory(t: float) -> Callable:
    def traction(x):
        return (0.0, t) if abs(x[0] - 48.0) < 1e-8 else (0.0, 0.0)

    return traction


@dataclass
class CookProblem:
    """Cook's membrane: clamped on x = 0, loaded on x = 48, lam-damped
    elasticity with the normalized Lame ratio lam."""

    lam: float = 2.333
    t: float = 0.03
    n0: int = 2
    estimator: str = "guaranteed"
    sweeps: int = 25
    workers: int = 1

    def __post_init__(self):
        self.traction = cook_traction_factory(self.t)
        self.prob = primal.ElasticityProblem(lam=self.lam, traction=self.traction)

    def initial_mesh(self):
        mesh = msh.create_structured(
            ("quadrilateral", COOK_CORNERS),
            self.n0,
            tagger=lambda mid: "dirichlet" if mid[0] < 1e-10 else "neumann",
        )
        return msh.split_low_valence_boundary(mesh)

    def solve(self, mesh, k):
        return primal.solve_elasticity(mesh, k, self.prob)

    def reconstruct(self, mesh, u_h, m, weak_symmetry=True):
        stress = primal.compute_flux(u_h, self.prob)
        W = FunctionSpace(mesh, "DiscLagrange", m - 1, components=2)
        rows = [project_l2(W, stress.row(i)) for i in range(2)]
        neumann = [lambda x, i=i: self.traction(x)[i] for i in range(2)]
        return equilibrate(
            mesh,
            rows,
            [None, None],  # body force 0
            m,
            neumann=neumann,
            weak_symmetry=weak_symmetry,
            primal_degree=u_h.space.degree,
            # global-objective sweeps are incompatible with the symmetry
            # correction; weak-symmetry runs keep the plain patch sum
            sweeps=0 if weak_symmetry else self.sweeps,
            workers=self.workers,
        )

    def estimate(self, u_h, field_r, config):
        if config.estimator == "heuristic":
            return estimate_heuristic(u_h, field_r, self.prob)
        return estimate_elasticity(u_h, field_r, self.prob, config.constants)

    def error(self, u_h):
        return None  # only computable against the post-hoc reference

    # -- reference error machinery ------------------------------------------

    def reference_solution(self, final_mesh, degree: int = 4, refinements: int = 2):
        mesh = final_mesh
        for _ in range(refinements):
            mesh = msh.refine_nvb(mesh, np.arange(mesh.n_cells))
        return primal.solve_elasticity(mesh, degree, self.prob)

    def attach_reference_errors(self, result, degree: int = 4, quad_degree: int = 8,
                                refinements: int = 2):
        """Fill the history's err column by comparing every level's solution
        with a degree-`degree` solve on the `refinements`-times refined
        final mesh."""
        u_ref = self.reference_solution(
            result.final_mesh, degree=degree, refinements=refinements
        )
        errs = [
            energy_error_against_reference(u_h, u_ref, self.lam, quad_degree)
            for u_h in result.solutions
        ]
        result.history.set_errors(errs)
        return u_ref


def energy_error_against_reference(u_coarse, u_ref, lam, quad_degree=8) -> float:
    """Elasticity energy distance integrated over the reference mesh.

    The coarse displacement gradient is evaluated at the reference
    quadrature points by locating each reference cell inside the coarse
    mesh (the meshes are nested by construction)."""
    pts, wts = triangle_rule(quad_degree)
    geo = u_ref.space.geometry
    X = geo.map_points(pts)  # (nc_ref, nq, 2)
    g_ref = u_ref.grad_on_cells(pts)
    g_h = _gradient_on_foreign_points(u_coarse, X)
    d = g_ref - g_h
    w = wts[None, :] * geo.detJ[:, None]
    eps = 0.5 * (d + np.swapaxes(d, -1, -2))
    tr = d[..., 0, 0] + d[..., 1, 1]
    val = np.einsum("cq,cqij,cqij->", w, eps, eps)
    val += lam * np.einsum("cq,cq,cq->", w, tr, tr)
    return float(np.sqrt(val))


def _locate_cells(mesh, points, tol=1e-9):
    """Containing-cell ids for physical points, via candidate lookup on cell
    centroids plus a barycentric test (brute-force fallback)."""
    cells = mesh.vertices[mesh.cells]  # (nc, 3, 2)
    centroids = cells.mean(axis=1)
    v0 = cells[:, 0]
    J = np.stack([cells[:, 1] - v0, cells[:, 2] - v0], axis=-1)
    Jinv = np.linalg.inv(J)

    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    kq = min(12, mesh.n_cells)
    _, cand = cKDTree(centroids).query(pts, k=kq)
    cand = np.atleast_2d(cand.reshape(len(pts), -1))

    owner = np.full(len(pts), -1, dtype=np.int64)
    for j in range(cand.shape[1]):
        todo = owner < 0
        if not todo.any():
            break
        c = cand[todo, j]
        loc = np.einsum(
            "pij,pj->pi", Jinv[c], pts[todo] - v0[c]
        )
        ok = (
            (loc[:, 0] >= -tol)
            & (loc[:, 1] >= -tol)
            & (loc.sum(axis=1) <= 1.0 + tol)
        )
        idx = np.flatnonzero(todo)
        owner[idx[ok]] = c[ok]
    for p in np.flatnonzero(owner < 0):  # fallback: exhaustive scan
        loc = np.einsum("cij,cj->ci", Jinv, pts[p] - v0)
        ok = np.flatnonzero(
            (loc[:, 0] >= -tol) & (loc[:, 1] >= -tol) & (loc.sum(axis=1) <= 1 + tol)
        )
        if len(ok) == 0:
            raise BenchmarkError("point outside the mesh")
        owner[p] = ok[0]
    return owner, v0, Jinv


def _gradient_on_foreign_points(u_h, X):
    """Gradients of a vector Lagrange function at arbitrary physical points
    X of shape (..., 2); returns (..., 2, 2)."""
    sp = u_h.space
    mesh = sp.mesh
    owner, v0, Jinv = _locate_cells(mesh, X)
    pts = np.asarray(X, dtype=float).reshape(-1, 2)
    ref = np.einsum("pij,pj->pi", Jinv[owner], pts - v0[owner])
    ref = np.clip(ref, 0.0, 1.0)

    _, grads_ref = sp.element.tabulate(ref)  # (np, nd, 2) at per-point coords
    loc = u_h.local_coefficients()[owner]  # (np, nd[, k])
    JinvT = np.swapaxes(Jinv, 1, 2)[owner]
    if sp.components == 1:
        g = np.einsum("pn,pnd->pd", loc, grads_ref)
        g = np.einsum("pij,pj->pi", JinvT, g)
        return g.reshape(X.shape[:-1] + (2,))
    g = np.einsum("pnk,pnd->pkd", loc, grads_ref)
    g = np.einsum("pij,pkj->pki", JinvT, g)
    return g.reshape(X.shape[:-1] + (2, 2))
