"""Doerfler marking and the SOLVE -> ESTIMATE -> MARK -> REFINE driver.

The driver is generic over a small problem protocol so the same loop serves
the diffusion and elasticity benchmarks:

    problem.initial_mesh()                      -> Mesh
    problem.solve(mesh, k)                      -> DiscreteFunction
    problem.reconstruct(mesh, u_h, m, weak_symmetry)
                                                -> equilibrated field
    problem.estimate(u_h, field, config)        -> ErrorEstimate
    problem.error(u_h)                          -> float or None

`error` may return None when a true error is only computable after the loop
has finished (reference solutions built on the final mesh); the history rows
are then completed post hoc with `ConvergenceHistory.set_errors`.
"""

import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from equilibra.estimation import EstimatorConstants
from equilibra.mesh import refine_nvb, split_low_valence_boundary


class AdaptivityError(RuntimeError):
    pass


def mark_doerfler(indicators, theta: float) -> np.ndarray:
    """Minimal greedy Doerfler set: the smallest prefix of cells, ordered by
    decreasing squared indicator (ties by ascending cell id), whose indicator
    sum reaches theta times the total."""
    ind = np.asarray(indicators, dtype=float)
    if ind.ndim != 1 or ind.size == 0:
        raise AdaptivityError("indicators must be a non-empty 1d array")
    if np.any(ind < 0):
        raise AdaptivityError("negative cell indicator")
    if not 0.0 < theta <= 1.0:
        raise AdaptivityError(f"theta must lie in (0, 1], got {theta}")
    total = float(ind.sum())
    if total <= 0.0:
        raise AdaptivityError(
            "all indicators vanish; the estimate claims exactness"
        )
    order = np.lexsort((np.arange(ind.size), -ind))
    csum = np.cumsum(ind[order])
    # tiny relative slack so that an exact theta-fraction prefix suffices
    target = theta * total * (1.0 - 1e-12)
    n_mark = int(np.searchsorted(csum, target)) + 1
    return np.sort(order[:n_mark])


@dataclass
class AdaptiveConfig:
    k: int
    m: int
    theta: float = 0.5
    max_levels: Optional[int] = None
    err_tol: Optional[float] = None
    min_rel_diameter: float = 1e-12
    estimator: str = "guaranteed"
    weak_symmetry: bool = False
    constants: EstimatorConstants = field(default_factory=EstimatorConstants)

    def __post_init__(self):
        if not 0.0 < self.theta <= 1.0:
            raise AdaptivityError("theta must lie in (0, 1]")
        if self.m < self.k:
            raise AdaptivityError("reconstruction degree m must be >= k")
        if self.estimator not in ("guaranteed", "heuristic"):
            raise AdaptivityError(f"unknown estimator {self.estimator!r}")
        if self.weak_symmetry and (self.k < 2 or self.m < 2):
            raise AdaptivityError("weak-symmetry runs require k, m >= 2")
        if self.max_levels is None and self.err_tol is None:
            raise AdaptivityError("need a stop rule: max_levels or err_tol")
        if self.max_levels is not None and self.max_levels < 1:
            raise AdaptivityError("max_levels must be >= 1")


@dataclass
class LevelRecord:
    level: int
    n_cells: int
    n_dof: int
    err: float          # nan until known
    eta: float
    eta_flux: float
    eta_osc: float
    eta_asym: float
    i_eff: float        # nan until err known
    eoc: float          # nan on level 0
    t_prime: float
    t_eqlb: float
    t_tot: float


@dataclass
class ConvergenceHistory:
    rows: List[LevelRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def append(self, row: LevelRecord):
        if self.rows and row.n_dof <= self.rows[-1].n_dof:
            raise AdaptivityError("n_dof must increase strictly across levels")
        self.rows.append(row)
        self._update_eoc()

    def set_errors(self, errs):
        """Fill in true errors computed after the loop (reference solutions
        that depend on the final mesh); recomputes i_eff and e.o.c."""
        errs = np.asarray(errs, dtype=float)
        if errs.shape != (len(self.rows),):
            raise AdaptivityError("one error value per history row required")
        for r, e in zip(self.rows, errs):
            r.err = float(e)
            r.i_eff = r.eta / r.err if r.err > 0 else np.inf
        self._update_eoc()

    def _update_eoc(self):
        prev = None
        for r in self.rows:
            if prev is None or not np.isfinite(r.err) or not np.isfinite(prev.err):
                r.eoc = np.nan
            else:
                r.eoc = -(np.log(r.err) - np.log(prev.err)) / (
                    np.log(r.n_dof) - np.log(prev.n_dof)
                )
            prev = r

    def final_eoc(self, window: int = 5) -> float:
        """Least-squares slope of log err against log n_dof over the last
        `window` levels with finite positive error."""
        err = self.column("err")
        ndof = self.column("n_dof")
        ok = np.isfinite(err) & (err > 0)
        err, ndof = err[ok], ndof[ok]
        if len(err) < 2:
            return np.nan
        w = min(len(err), max(2, window))
        err, ndof = err[-w:], ndof[-w:]
        slope = np.polyfit(np.log(ndof), np.log(err), 1)[0]
        return float(-slope)


@dataclass
class AdaptiveResult:
    history: ConvergenceHistory
    meshes: list
    solutions: list

    @property
    def final_mesh(self):
        return self.meshes[-1]


def adaptive_loop(problem, config: AdaptiveConfig) -> AdaptiveResult:
    mesh = problem.initial_mesh()
    floor = config.min_rel_diameter * _domain_diameter(mesh)
    history = ConvergenceHistory()
    meshes, solutions = [], []
    level = 0
    while True:
        t_level = time.perf_counter()
        t0 = time.perf_counter()
        u_h = problem.solve(mesh, config.k)
        t_prime = time.perf_counter() - t0

        t0 = time.perf_counter()
        field_r = problem.reconstruct(mesh, u_h, config.m, config.weak_symmetry)
        t_eqlb = time.perf_counter() - t0

        est = problem.estimate(u_h, field_r, config)
        err = problem.error(u_h)
        t_tot = time.perf_counter() - t_level

        eta_osc = (
            np.nan if est.term_osc is None
            else float(np.sqrt((est.term_osc**2).sum()))
        )
        history.append(LevelRecord(
            level=level,
            n_cells=mesh.n_cells,
            n_dof=u_h.space.ndofs,
            err=np.nan if err is None else float(err),
            eta=est.eta,
            eta_flux=float(np.sqrt((est.term_flux**2).sum())),
            eta_osc=eta_osc,
            eta_asym=np.nan if est.eta_as is None else est.eta_as,
            i_eff=np.nan if err is None or err <= 0 else est.eta / err,
            eoc=np.nan,
            t_prime=t_prime,
            t_eqlb=t_eqlb,
            t_tot=t_tot,
        ))
        meshes.append(mesh)
        solutions.append(u_h)

        if config.max_levels is not None and level + 1 >= config.max_levels:
            break
        if config.err_tol is not None:
            # fall back on eta when the true error is only known post hoc;
            # for the guaranteed estimator eta >= err makes this conservative
            measure = err if err is not None else est.eta
            if measure <= config.err_tol:
                break
        if mesh.cell_diameters().min() <= floor:
            break

        marked = mark_doerfler(est.eta_T_sq, config.theta)
        mesh = refine_nvb(mesh, marked)
        if config.weak_symmetry:
            # the symmetry correction is singular on patches with fewer
            # than two internal facets; bisecting a boundary edge always
            # creates one, so repair the mesh after each refinement
            mesh = split_low_valence_boundary(mesh)
        level += 1

    return AdaptiveResult(history=history, meshes=meshes, solutions=solutions)


def _domain_diameter(mesh) -> float:
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    return float(np.linalg.norm(hi - lo))
