"""A-posteriori error estimators built on equilibrated fluxes and stresses.

The guaranteed Poisson bound combines the weighted flux difference with a
per-cell Poincare-weighted data oscillation term,

    eta_T = ||kappa^{-1/2} (sigma_R - sigma(u_h))||_T
            + C_{P,T} ||f - div sigma_R||_T ,

and the elasticity bound adds a weak-symmetry penalty,

    eta^2 = ||sigma_R - sigma(u_h)||_A^2
            + C_K sum_T (||skw sigma_R||_T + C_{P,T} ||f + div sigma_R||_T)^2.

The heuristic elasticity indicator is the plain L2 distance between the
(unsymmetrized) reconstruction and the discrete stress.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from equilibra.primal import (
    ElasticityProblem,
    FluxEvaluator,
    PoissonProblem,
    StressEvaluator,
)
from equilibra.quadrature import triangle_rule


class EstimationError(RuntimeError):
    pass


@dataclass
class EstimatorConstants:
    """Per-cell Poincare constant rule and the Korn-type constant."""

    poincare: Callable[[np.ndarray], np.ndarray] = lambda h: h / np.pi
    korn: float = 1.0

    def __post_init__(self):
        if self.korn <= 0:
            raise EstimationError("the Korn-type constant must be positive")

    def poincare_cells(self, mesh) -> np.ndarray:
        h = cell_diameters(mesh)
        vals = np.asarray(self.poincare(h), dtype=float)
        if np.any(vals <= 0):
            raise EstimationError("Poincare constants must be positive")
        return vals


def cell_diameters(mesh) -> np.ndarray:
    p = mesh.vertices[mesh.cells]  # (nc, 3, 2)
    e = np.stack(
        [p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1
    )
    return np.linalg.norm(e, axis=2).max(axis=1)


@dataclass
class ErrorEstimate:
    term_flux: np.ndarray               # per cell, >= 0
    term_osc: Optional[np.ndarray]      # per cell, None for the heuristic
    term_asym: Optional[np.ndarray]     # per cell, elasticity only
    eta_T_sq: np.ndarray                # per-cell indicator, eta^2 = sum
    eta: float = field(init=False)
    eta_as: Optional[float] = None      # asymmetry share (elasticity)

    def __post_init__(self):
        if np.any(self.eta_T_sq < -1e-14):
            raise EstimationError("negative cell indicator")
        self.eta_T_sq = np.maximum(self.eta_T_sq, 0.0)
        self.eta = float(np.sqrt(self.eta_T_sq.sum()))


@dataclass
class EfficiencyReport:
    err: float
    eta: float

    @property
    def i_eff(self):
        return self.eta / self.err


def _rt_rows(sigma_r):
    """Normalize sigma_R input: an EquilibratedField or a list of RT
    functions or a single RT function."""
    if hasattr(sigma_r, "fluxes"):
        return sigma_r.fluxes
    if isinstance(sigma_r, (list, tuple)):
        return list(sigma_r)
    return [sigma_r]


def _check_meshes(u_h, rows):
    for r in rows:
        if r.space.mesh is not u_h.space.mesh:
            raise EstimationError(
                "discrete solution and reconstruction live on different meshes"
            )


def _quad(u_h, rows):
    deg = 2 * max(u_h.space.degree, rows[0].space.degree) + 4
    return triangle_rule(deg)


def _cellwise(value, X, vec=False):
    if value is None:
        shape = X.shape if vec else X.shape[:2]
        return np.zeros(shape)
    if callable(value):
        out = np.asarray(value(X), dtype=float)
        want = X.shape if vec else X.shape[:2]
        return np.broadcast_to(out, want)
    want = X.shape if vec else X.shape[:2]
    return np.broadcast_to(np.asarray(value, dtype=float), want)


def estimate_poisson(
    u_h,
    sigma_r,
    problem: PoissonProblem,
    constants: Optional[EstimatorConstants] = None,
) -> ErrorEstimate:
    """Guaranteed bound on ||kappa^{1/2} grad(u - u_h)||."""
    constants = constants or EstimatorConstants()
    rows = _rt_rows(sigma_r)
    _check_meshes(u_h, rows)
    sig = rows[0]
    mesh = u_h.space.mesh
    pts, wts = _quad(u_h, rows)
    geo = u_h.space.geometry
    w = wts[None, :] * geo.detJ[:, None]

    kap = problem.kappa_cells(mesh)
    diff = sig.eval_on_cells(pts) - FluxEvaluator(u_h, problem).eval_on_cells(pts)
    flux_sq = np.einsum("cq,cqi,cqi->c", w, diff, diff) / kap
    term_flux = np.sqrt(np.maximum(flux_sq, 0.0))

    X = geo.map_points(pts)
    resid = _cellwise(problem.f, X) - sig.div_on_cells(pts)
    osc_sq = np.einsum("cq,cq,cq->c", w, resid, resid)
    term_osc = constants.poincare_cells(mesh) * np.sqrt(np.maximum(osc_sq, 0.0))

    eta_T = term_flux + term_osc
    return ErrorEstimate(term_flux, term_osc, None, eta_T**2)


def _stress_tensor(rows, pts):
    s = np.stack([r.eval_on_cells(pts) for r in rows], axis=-2)  # (c,q,2,2)
    d = np.stack([r.div_on_cells(pts) for r in rows], axis=-1)   # (c,q,2)
    return s, d


def estimate_elasticity(
    u_h,
    sigma_r,
    problem: ElasticityProblem,
    constants: Optional[EstimatorConstants] = None,
) -> ErrorEstimate:
    """Guaranteed bound on the elasticity energy norm of u - u_h.

    The flux difference is measured in the compliance norm
    ||tau||_A^2 = int (tau - lam/(2(1+lam)) tr(tau) I) : tau / 2.
    """
    constants = constants or EstimatorConstants()
    rows = _rt_rows(sigma_r)
    if len(rows) != 2:
        raise EstimationError("elasticity estimate needs the two stress rows")
    _check_meshes(u_h, rows)
    mesh = u_h.space.mesh
    pts, wts = _quad(u_h, rows)
    geo = u_h.space.geometry
    w = wts[None, :] * geo.detJ[:, None]
    lam = problem.lam

    sig, div = _stress_tensor(rows, pts)
    diff = sig - StressEvaluator(u_h, problem).eval_on_cells(pts)
    tr = diff[..., 0, 0] + diff[..., 1, 1]
    a_sq = 0.5 * (
        np.einsum("cq,cqij,cqij->c", w, diff, diff)
        - lam / (2.0 * (1.0 + lam)) * np.einsum("cq,cq,cq->c", w, tr, tr)
    )
    term_flux = np.sqrt(np.maximum(a_sq, 0.0))

    skw = 0.5 * (sig[..., 0, 1] - sig[..., 1, 0])
    # ||skw tau|| with skw tau = [[0, s], [-s, 0]]: norm^2 = 2 s^2
    asym_sq = 2.0 * np.einsum("cq,cq,cq->c", w, skw, skw)
    term_asym = np.sqrt(np.maximum(asym_sq, 0.0))

    X = geo.map_points(pts)
    resid = _cellwise(problem.f, X, vec=True) + div
    osc_sq = np.einsum("cq,cqi,cqi->c", w, resid, resid)
    term_osc = constants.poincare_cells(mesh) * np.sqrt(np.maximum(osc_sq, 0.0))

    pen = constants.korn * (term_asym + term_osc) ** 2
    est = ErrorEstimate(term_flux, term_osc, term_asym, term_flux**2 + pen)
    est.eta_as = float(np.sqrt(pen.sum()))
    return est


def estimate_heuristic(u_h, sigma_r, problem: ElasticityProblem) -> ErrorEstimate:
    """Compliance-norm distance ||sigma_R - sigma(u_h)||_A of an
    unsymmetrized reconstruction; no oscillation or asymmetry terms.

    This is exactly the flux term of the guaranteed bound, so on identical
    inputs the heuristic value never exceeds the guaranteed one."""
    rows = _rt_rows(sigma_r)
    if len(rows) != 2:
        raise EstimationError("elasticity estimate needs the two stress rows")
    _check_meshes(u_h, rows)
    pts, wts = _quad(u_h, rows)
    geo = u_h.space.geometry
    w = wts[None, :] * geo.detJ[:, None]
    lam = problem.lam
    sig, _ = _stress_tensor(rows, pts)
    diff = sig - StressEvaluator(u_h, problem).eval_on_cells(pts)
    tr = diff[..., 0, 0] + diff[..., 1, 1]
    a_sq = 0.5 * (
        np.einsum("cq,cqij,cqij->c", w, diff, diff)
        - lam / (2.0 * (1.0 + lam)) * np.einsum("cq,cq,cq->c", w, tr, tr)
    )
    term_flux = np.sqrt(np.maximum(a_sq, 0.0))
    return ErrorEstimate(term_flux, None, None, a_sq)


def true_error(u_h, reference, problem, quad_degree: int = 12) -> float:
    """Energy-norm distance between u_h and a reference solution.

    reference: a DiscreteFunction on the same mesh, or a callable of
    physical coordinates returning the exact gradient (Poisson: (..., 2);
    elasticity: the displacement gradient (..., 2, 2)).
    """
    if reference is None:
        raise EstimationError("true_error requires a reference solution")
    pts, wts = triangle_rule(quad_degree)
    geo = u_h.space.geometry
    w = wts[None, :] * geo.detJ[:, None]
    g_h = u_h.grad_on_cells(pts)
    if hasattr(reference, "grad_on_cells"):
        if reference.space.mesh is not u_h.space.mesh:
            raise EstimationError("reference lives on a different mesh")
        g_ref = reference.grad_on_cells(pts)
    else:
        g_ref = np.asarray(reference(geo.map_points(pts)), dtype=float)
    d = g_ref - g_h

    if isinstance(problem, PoissonProblem):
        kap = problem.kappa_cells(u_h.space.mesh)
        return float(np.sqrt(np.einsum("cq,cqi,cqi,c->", w, d, d, kap)))
    if isinstance(problem, ElasticityProblem):
        eps = 0.5 * (d + np.swapaxes(d, -1, -2))
        tr = d[..., 0, 0] + d[..., 1, 1]
        val = np.einsum("cq,cqij,cqij->", w, eps, eps)
        val += problem.lam * np.einsum("cq,cq,cq->", w, tr, tr)
        return float(np.sqrt(val))
    raise EstimationError(f"unsupported problem type {type(problem)!r}")


def efficiency(estimate: ErrorEstimate, err: float) -> EfficiencyReport:
    return EfficiencyReport(err=err, eta=estimate.eta)
