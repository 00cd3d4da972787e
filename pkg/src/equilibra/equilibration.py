"""Patch-local equilibration of fluxes and weakly symmetric stresses.

Given cellwise projections of the approximate flux rows and of the target
divergence, the reconstruction sums vertex-patch contributions

    sigma_R = sum_z sigma_z,      sigma_z in RT_m(omega_z),

where each sigma_z solves a constrained local minimization: it matches the
hat-weighted divergence target, carries the hat-weighted Neumann trace on
the outer boundary, has vanishing normal trace on the rest of the patch
boundary (Dirichlet parts excepted) and is closest to phi_z * flux in L2.

Each patch solve is split into a feasibility step (a small least-squares
solve for the trace and divergence-carrying DOFs) and an unconstrained
minimization over the divergence-free patch space. That space is
parametrized as curls of scalar Lagrange(m) potentials vanishing on the
non-Dirichlet patch boundary, which turns the minimization matrix into a
standard stiffness matrix (SPD, shared between stress rows).

The optional weak-symmetry correction adds a saddle-point solve per patch
with a P1 Lagrange multiplier, reduced via the Schur complement
S = B1^T A^-1 B1 + B2^T A^-1 B2 on the multiplier space.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
import scipy.linalg as sla

from equilibra import elements as el
from equilibra.mesh import DIRICHLET, Mesh, Patch, build_patch
from equilibra.quadrature import interval_rule, triangle_rule
from equilibra.spaces import DiscreteFunction, FunctionSpace

_P1_REF_GRADS = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


class EquilibrationError(RuntimeError):
    pass


@lru_cache(maxsize=None)
def curl_conversion(m: int) -> np.ndarray:
    """RT(m) coefficients of the reference curl of every Lagrange(m) basis
    function. The contravariant Piola map commutes with the scalar curl
    (M R M^T = det(M) R for any 2x2 M), so one matrix serves all cells."""
    lag = el.LagrangeElement(m)
    rt = el.RTElement(m)
    K = np.empty((rt.dim, lag.dim))
    for j in range(lag.dim):

        def curl_j(p, j=j):
            _, g = lag.tabulate(np.atleast_2d(p))
            return np.array([g[0, j, 1], -g[0, j, 0]])

        K[:, j] = rt.dof_functionals(curl_j)
    return K


@dataclass
class EquilibratedField:
    """One RT(m) function per reconstructed flux (Poisson: 1, elasticity: 2
    stress rows)."""

    fluxes: list

    @property
    def space(self):
        return self.fluxes[0].space


@dataclass
class PatchContribution:
    rt_dofs: np.ndarray       # global RT dof ids covered by the patch
    explicit: np.ndarray      # feasible point, as global dof values
    minimization: np.ndarray  # divergence-free correction, global dof values
    psi_coeffs: np.ndarray    # potential coefficients (free curl dofs)
    feasibility_residual: float
    compatibility_defect: float

    @property
    def total(self):
        return self.explicit + self.minimization


@dataclass
class PatchSystem:
    """Saddle-point data of the weak-symmetry correction on one patch."""

    A_factor: object          # Cholesky factor of the curl-space Gram matrix
    B1: np.ndarray            # (n_curl, n_p1) coupling of stress row 1
    B2: np.ndarray
    C: Optional[np.ndarray]   # mean constraint, active without Dirichlet contact
    L_c: np.ndarray
    S: Optional[np.ndarray] = None


def solve_schur(system: PatchSystem):
    """Solve the patch saddle system via the multiplier Schur complement.

    Returns (u_R1, u_R2, c, lam) with A u_Ri + B_i c = 0,
    B1^T u_R1 + B2^T u_R2 + C lam = L_c and C^T c = 0 (when C is present).
    """
    X1 = sla.cho_solve(system.A_factor, system.B1)
    X2 = sla.cho_solve(system.A_factor, system.B2)
    S = system.B1.T @ X1 + system.B2.T @ X2
    system.S = S
    if system.C is None:
        try:
            c = sla.cho_solve(sla.cho_factor(S), -system.L_c)
        except np.linalg.LinAlgError as exc:
            raise EquilibrationError("singular Schur complement") from exc
        lam = np.zeros(0)
    else:
        n = len(system.L_c)
        M = np.zeros((n + 1, n + 1))
        M[:n, :n] = -S
        M[:n, n] = system.C
        M[n, :n] = system.C
        rhs = np.concatenate([system.L_c, [0.0]])
        try:
            sol = np.linalg.solve(M, rhs)
        except np.linalg.LinAlgError as exc:
            raise EquilibrationError("singular Schur complement") from exc
        c, lam = sol[:n], sol[n:]
    u1 = -sla.cho_solve(system.A_factor, system.B1 @ c)
    u2 = -sla.cho_solve(system.A_factor, system.B2 @ c)
    return u1, u2, c, lam


class Equilibrator:
    """Shared tabulations and per-patch solvers for one (mesh, m) pair."""

    def __init__(self, mesh: Mesh, m: int, dirichlet_facets=None, weights=None):
        if not 1 <= m <= 4:
            raise EquilibrationError(f"equilibration degree m={m} unsupported")
        self.mesh = mesh
        self.m = m
        # per-cell weight of the minimization norm (1/kappa for diffusion
        # problems with discontinuous coefficients, so that the patch
        # minimizers are sharp in the kappa^{-1/2}-weighted estimator norm)
        if weights is None:
            self.weights = np.ones(mesh.n_cells)
        else:
            self.weights = np.asarray(weights, dtype=float)
            if self.weights.shape != (mesh.n_cells,) or np.any(self.weights <= 0):
                raise EquilibrationError("weights must be positive, one per cell")
        self.Vrt = FunctionSpace(mesh, "RaviartThomasHier", m)
        self.Vpsi = FunctionSpace(mesh, "Lagrange", m)
        self.rt_dim = self.Vrt.element.dim
        self.n_int = self.rt_dim - 3 * m
        self.Kcurl = curl_conversion(m)

        if dirichlet_facets is None:
            dirichlet_facets = mesh.boundary_facets(DIRICHLET)
        self.is_dirichlet = np.zeros(mesh.n_facets, dtype=bool)
        self.is_dirichlet[np.asarray(dirichlet_facets, dtype=int)] = True
        boundary = mesh.facet_cells[:, 1] < 0
        self.is_neumann = boundary & ~self.is_dirichlet

        self.pts, self.wts = triangle_rule(2 * m + 2)
        self.rt_vals, self.rt_divs = self.Vrt.element.tabulate(self.pts)
        self.psi_vals, self.psi_grads = self.Vpsi.element.tabulate(self.pts)
        self.p1_vals, _ = el.LagrangeElement(1).tabulate(self.pts)

        exps = el.monomials(m - 1)
        mono_q = el.mono_eval(exps, self.pts)  # (nq, nt)
        self.n_constr = mono_q.shape[1]
        self.mono_q = mono_q
        # reference divergence-constraint matrix (detJ cancels)
        self.Dhat = np.einsum("q,qn,qt->tn", self.wts, self.rt_divs, mono_q)
        self.t_const = next(i for i, e in enumerate(exps) if e == (0, 0))

        self.xq_e, self.wq_e = interval_rule(2 * m + 4)
        self.leg_e = np.array(
            [el.shifted_legendre(j)(self.xq_e) for j in range(m)]
        )

    # -- patch bookkeeping -------------------------------------------------

    def _setup(self, patch: Patch):
        mesh, m = self.mesh, self.m
        cells = np.asarray(patch.cells, dtype=int)
        z = patch.center_vertex
        cf = mesh.cell_facets[cells]
        facets, counts = np.unique(cf, return_counts=True)
        inner = counts == 2  # facets interior to the patch

        rt_gids = np.concatenate(
            [np.arange(f * m, f * m + m) for f in facets]
            + [
                mesh.n_facets * m + np.arange(c * self.n_int, (c + 1) * self.n_int)
                for c in cells
            ]
        )
        gid2idx = {g: i for i, g in enumerate(rt_gids)}
        P_rt = np.array(
            [[gid2idx[g] for g in self.Vrt.dofmap[c]] for c in cells], dtype=int
        )
        scale = self.Vrt.rt_scale[cells]
        n_patch = len(rt_gids)

        # explicit-step dof classification
        free = np.zeros(n_patch, dtype=bool)
        neumann_facets = []  # (facet id, first patch dof index)
        for fi, f in enumerate(facets):
            sl = slice(fi * m, fi * m + m)
            if inner[fi] or self.is_dirichlet[f]:
                free[sl] = True
            elif self.is_neumann[f] and z in mesh.facets[f]:
                neumann_facets.append((f, fi * m))
            # otherwise: fixed to zero
        nfac = len(facets) * m
        elem = self.Vrt.element
        for ci in range(len(cells)):
            base = nfac + ci * self.n_int
            for d in elem.div_interior_dofs:
                free[base + (d - 3 * m)] = True
            # divergence-free interior dofs stay fixed at zero

        # curl potential space: Lagrange(m) on the patch, constant on every
        # connected component of the zero-trace part of the patch boundary
        # (all outer facets except Dirichlet ones). One component is pinned
        # to zero; each further component keeps its constant as a single
        # grouped degree of freedom, encoded in the reduction matrix Q.
        psi_gids = np.unique(self.Vpsi.dofmap[cells])
        pgid2idx = {g: i for i, g in enumerate(psi_gids)}
        P_psi = np.array(
            [[pgid2idx[g] for g in self.Vpsi.dofmap[c]] for c in cells], dtype=int
        )
        npsi = len(psi_gids)
        bz = [f for fi, f in enumerate(facets)
              if not inner[fi] and not self.is_dirichlet[f]]
        comp_of = {}  # vertex -> component id, with union-find over bz facets
        parent = {}

        def find(v):
            while parent[v] != v:
                parent[v] = parent[parent[v]]
                v = parent[v]
            return v

        for f in bz:
            for v in mesh.facets[f]:
                parent.setdefault(v, v)
            a_, b_ = mesh.facets[f]
            parent[find(a_)] = find(b_)
        comp_dofs = {}
        for f in bz:
            root = find(mesh.facets[f, 0])
            dofs = comp_dofs.setdefault(root, set())
            dofs.update(pgid2idx[v] for v in mesh.facets[f])
            dofs.update(
                pgid2idx[mesh.n_vertices + f * (m - 1) + t] for t in range(m - 1)
            )
        components = sorted(comp_dofs.values(), key=min)
        grouped = np.zeros(npsi, dtype=bool)
        for dofs in components:
            grouped[list(dofs)] = True
        cols = []
        eye = np.eye(npsi)
        if not components:
            # fully Dirichlet-surrounded patch: remove the constant mode
            cols = [eye[:, j] for j in range(1, npsi)]
        else:
            cols = [eye[:, j] for j in np.flatnonzero(~grouped)]
            for dofs in components[1:]:
                ind = np.zeros(npsi)
                ind[list(dofs)] = 1.0
                cols.append(ind)
        Q = np.column_stack(cols) if cols else np.zeros((npsi, 0))

        geo = self.Vrt.geometry
        detJ = geo.detJ[cells]
        J = geo.J[cells]
        JinvT = np.swapaxes(geo.Jinv[cells], 1, 2)
        G = np.einsum("cij,qnj->cqni", JinvT, self.psi_grads)
        curlG = np.stack([G[..., 1], -G[..., 0]], axis=-1)
        wdetJ = detJ * self.weights[cells]
        Kc = np.einsum("q,cqni,cqmi,c->cnm", self.wts, G, G, wdetJ)
        A = np.zeros((npsi, npsi))
        for ci in range(len(cells)):
            A[np.ix_(P_psi[ci], P_psi[ci])] += Kc[ci]
        try:
            A_factor = sla.cho_factor(Q.T @ A @ Q)
        except np.linalg.LinAlgError as exc:
            raise EquilibrationError(
                f"curl-space matrix not SPD on patch of vertex {z}"
            ) from exc

        lz = np.array(
            [np.flatnonzero(mesh.cells[c] == z)[0] for c in cells], dtype=int
        )
        phi = self.p1_vals[:, lz].T  # (nc, nq)
        gphi = np.einsum("cij,cj->ci", JinvT, _P1_REF_GRADS[lz])

        # divergence-constraint matrix over patch dofs
        nt = self.n_constr
        M = np.zeros((len(cells) * nt, n_patch))
        for ci in range(len(cells)):
            M[ci * nt : (ci + 1) * nt, P_rt[ci]] += self.Dhat * scale[ci][None, :]

        return {
            "z": z,
            "cells": cells,
            "facets": facets,
            "rt_gids": rt_gids,
            "P_rt": P_rt,
            "scale": scale,
            "free": free,
            "neumann_facets": neumann_facets,
            "psi_gids": psi_gids,
            "P_psi": P_psi,
            "Q": Q,
            "A_factor": A_factor,
            "dirichlet_contact": bool(np.any(~inner & self.is_dirichlet[facets])),
            "detJ": detJ,
            "wdetJ": wdetJ,
            "J": J,
            "G": G,
            "curlG": curlG,
            "phi": phi,
            "gphi": gphi,
            "M": M,
            "n_internal": int(np.count_nonzero(counts == 2)),
        }

    # -- field evaluation helpers -------------------------------------------

    def _patch_field_values(self, setup, w_patch):
        """Values of a patch RT function at the cell quadrature points."""
        loc = setup["scale"] * w_patch[setup["P_rt"]]
        v = np.einsum("cn,qnd->cqd", loc, self.rt_vals)
        return np.einsum("cij,cqj->cqi", setup["J"], v) / setup["detJ"][:, None, None]

    def _curl_to_patch_values(self, setup, psi_full):
        """Global RT dof values of curl(psi) for a patch potential."""
        loc_psi = psi_full[setup["P_psi"]]  # (nc, ndL)
        loc_rt = loc_psi @ self.Kcurl.T  # (nc, nd_rt)
        vals = np.zeros(len(setup["rt_gids"]))
        written = np.zeros(len(setup["rt_gids"]), dtype=bool)
        for ci in range(len(setup["cells"])):
            idx = setup["P_rt"][ci]
            new = ~written[idx]
            vals[idx[new]] = (loc_rt[ci] / setup["scale"][ci])[new]
            written[idx[new]] = True
        return vals

    def _neumann_values(self, setup, neumann_row):
        """Fixed dof values on Neumann facets touching the patch center:
        Legendre moments of phi_z * prescribed normal trace."""
        vals = np.zeros(len(setup["rt_gids"]))
        if not setup["neumann_facets"]:
            return vals
        mesh, m = self.mesh, self.m
        z = setup["z"]
        for f, off in setup["neumann_facets"]:
            v0, v1 = mesh.facets[f]
            a, b = mesh.vertices[v0], mesh.vertices[v1]
            pts = a[None, :] + np.outer(self.xq_e, b - a)
            if neumann_row is None:
                g = np.zeros(len(self.xq_e))
            else:
                g = np.array([float(neumann_row(p)) for p in pts])
            hat = 1.0 - self.xq_e if v0 == z else self.xq_e
            for j in range(m):
                vals[off + j] = (2 * j + 1) * np.sum(
                    self.wq_e * hat * g * self.leg_e[j]
                )
        return vals

    # -- patch solvers ------------------------------------------------------

    def equilibrate_patch_semiexplicit(
        self, patch, flux_vals, rhs_vals, neumann_row=None, setup=None
    ) -> PatchContribution:
        """Feasibility step plus divergence-free minimization on one patch.

        flux_vals / rhs_vals: quadrature-point values of the projected flux
        row (nc_global, nq, 2) and divergence target (nc_global, nq), indexed
        by global cell ids.
        """
        if setup is None:
            setup = self._setup(patch)
        cells = setup["cells"]
        nt = self.n_constr

        theta = flux_vals[cells]  # (nc, nq, 2)
        dval = rhs_vals[cells] if rhs_vals is not None else 0.0
        r = setup["phi"] * dval + np.einsum("ci,cqi->cq", setup["gphi"], theta)
        b = np.einsum("c,q,cq,qt->ct", setup["detJ"], self.wts, r, self.mono_q)
        b = b.ravel()

        w = self._neumann_values(setup, neumann_row)
        free = setup["free"]
        M = setup["M"]
        rhs_vec = b - M[:, ~free] @ w[~free]
        sol, *_ = np.linalg.lstsq(M[:, free], rhs_vec, rcond=None)
        w[free] = sol

        res = M[:, free] @ sol - rhs_vec
        # the only admissible inconsistency is the global compatibility
        # direction (constant test function summed over the patch)
        u0 = np.zeros(len(b))
        u0[self.t_const :: nt] = 1.0
        u0 /= np.linalg.norm(u0)
        defect = float(u0 @ res)
        res_perp = res - defect * u0
        feas = float(np.linalg.norm(res_perp))
        if feas > 1e-7 * (1.0 + np.linalg.norm(b)):
            raise AssertionError(
                f"patch {setup['z']}: divergence constraints unsatisfiable "
                f"(residual {feas:.2e})"
            )

        # minimization over curls: minimize || w + curl(psi) - phi_z theta ||
        wvals = self._patch_field_values(setup, w)
        target = wvals - setup["phi"][:, :, None] * theta
        lloc = -np.einsum(
            "c,q,cqi,cqni->cn", setup["wdetJ"], self.wts, target, setup["curlG"]
        )
        L = np.zeros(len(setup["psi_gids"]))
        np.add.at(L, setup["P_psi"].ravel(), lloc.ravel())
        delta = sla.cho_solve(setup["A_factor"], setup["Q"].T @ L)
        w_min = self._curl_to_patch_values(setup, setup["Q"] @ delta)

        return PatchContribution(
            rt_dofs=setup["rt_gids"],
            explicit=w,
            minimization=w_min,
            psi_coeffs=delta,
            feasibility_residual=feas,
            compatibility_defect=abs(defect),
        )

    def impose_weak_symmetry_patch(
        self, patch, contributions, flux_vals_rows, setup=None
    ):
        """Weak-symmetry correction for the two stress rows of one patch.

        Returns ([corr_row1, corr_row2], PatchSystem) where the corrections
        are global RT dof values on the patch.
        """
        if setup is None:
            setup = self._setup(patch)
        if setup["n_internal"] < 2:
            raise EquilibrationError(
                f"patch of vertex {setup['z']} has fewer than two internal "
                "facets; weak symmetry is not solvable"
            )
        cells = setup["cells"]
        mesh = self.mesh

        # P1 multiplier space on the patch
        pverts = np.unique(mesh.cells[cells])
        v2i = {v: i for i, v in enumerate(pverts)}
        P_p1 = np.array([[v2i[v] for v in mesh.cells[c]] for c in cells], dtype=int)

        w = self.wts[None, :] * setup["detJ"][:, None]  # (nc, nq)
        gam = self.p1_vals  # (nq, 3)
        npsi, np1 = len(setup["psi_gids"]), len(pverts)
        B1_full = np.zeros((npsi, np1))
        B2_full = np.zeros((npsi, np1))
        G = setup["G"]
        b1loc = np.einsum("cq,qp,cqn->cnp", w, gam, G[..., 0])
        b2loc = np.einsum("cq,qp,cqn->cnp", w, gam, G[..., 1])
        for ci in range(len(cells)):
            B1_full[np.ix_(setup["P_psi"][ci], P_p1[ci])] += b1loc[ci]
            B2_full[np.ix_(setup["P_psi"][ci], P_p1[ci])] += b2loc[ci]
        B1 = setup["Q"].T @ B1_full
        B2 = setup["Q"].T @ B2_full

        # L_c[p] = int (Delta1_y - Delta2_x) gamma_p with Delta_i the patch
        # stress row minus phi_z times the projected stress row
        d1 = self._patch_field_values(setup, contributions[0].total)
        d2 = self._patch_field_values(setup, contributions[1].total)
        d1 = d1 - setup["phi"][:, :, None] * flux_vals_rows[0][cells]
        d2 = d2 - setup["phi"][:, :, None] * flux_vals_rows[1][cells]
        lcloc = np.einsum("cq,cq,qp->cp", w, d1[..., 1] - d2[..., 0], gam)
        L_c = np.zeros(np1)
        np.add.at(L_c, P_p1.ravel(), lcloc.ravel())

        C = None
        if not setup["dirichlet_contact"]:
            cloc = np.einsum("cq,qp->cp", w, gam)
            C = np.zeros(np1)
            np.add.at(C, P_p1.ravel(), cloc.ravel())

        system = PatchSystem(
            A_factor=setup["A_factor"], B1=B1, B2=B2, C=C, L_c=L_c
        )
        u1, u2, _, _ = solve_schur(system)
        corrections = [
            self._curl_to_patch_values(setup, setup["Q"] @ u) for u in (u1, u2)
        ]
        return corrections, system

    # -- driver --------------------------------------------------------------

    def equilibrate(self, fluxes, rhs, neumann=None, weak_symmetry=False,
                    sweeps=0, workers=1):
        """Run the patch loop for all vertices; see module docstring.

        fluxes: per row, a DiscreteFunction (or eval_on_cells object) holding
        the degree-(m-1) projection of the flux / stress row.
        rhs: per row, the projected divergence target (div sigma_R = Pi rhs),
        or None for zero.
        neumann: per row, a callable x -> prescribed normal trace on the
        Neumann boundary, or None.
        sweeps: number of multiplicative-Schwarz passes over the patches
        that re-minimize the global distance to the projected flux on the
        divergence-free patch spaces. Sweeps leave every constraint
        (divergence, normal traces) untouched and reuse the cached patch
        factorizations; they drive the summed reconstruction towards the
        global constrained minimizer.
        workers: number of threads for the (independent) patch solves.
        Contributions are accumulated sequentially in vertex order, so the
        result is bitwise independent of the worker count.
        """
        n_rhs = len(fluxes)
        if len(rhs) != n_rhs:
            raise EquilibrationError("fluxes and rhs lists differ in length")
        if weak_symmetry:
            if n_rhs != 2:
                raise EquilibrationError("weak symmetry requires two stress rows")
            if self.m < 2:
                raise EquilibrationError("weak symmetry requires m >= 2")
            if sweeps:
                raise EquilibrationError(
                    "global minimization sweeps would break the weak "
                    "symmetry correction; use sweeps=0"
                )
        if neumann is None:
            neumann = [None] * n_rhs

        flux_vals = [f.eval_on_cells(self.pts) for f in fluxes]
        rhs_vals = [None if r is None else r.eval_on_cells(self.pts) for r in rhs]

        coeffs = [np.zeros(self.Vrt.ndofs) for _ in range(n_rhs)]
        setups = [] if sweeps else None
        # only these entries are needed by the sweep passes; caching full
        # setups for every vertex patch is prohibitive on fine meshes
        sweep_keys = ("cells", "rt_gids", "P_rt", "scale", "P_psi", "Q",
                      "A_factor", "detJ", "wdetJ", "J", "curlG", "psi_gids")

        def run_patch(z):
            patch = build_patch(self.mesh, z)
            setup = self._setup(patch)
            if weak_symmetry and setup["n_internal"] < 2:
                raise EquilibrationError(
                    f"patch of vertex {z} has fewer than two internal facets; "
                    "split the mesh before equilibrating with weak symmetry"
                )
            contribs = [
                self.equilibrate_patch_semiexplicit(
                    patch, flux_vals[i], rhs_vals[i], neumann[i], setup=setup
                )
                for i in range(n_rhs)
            ]
            if weak_symmetry:
                syms, _ = self.impose_weak_symmetry_patch(
                    patch, contribs, flux_vals, setup=setup
                )
                for i in range(2):
                    contribs[i].minimization = contribs[i].minimization + syms[i]
            slim = (
                {key: setup[key] for key in sweep_keys} if sweeps else None
            )
            return contribs, slim

        # patch solves are independent; the accumulation below runs
        # sequentially in vertex order either way, so the coefficients are
        # bitwise identical for any number of workers
        for contribs, slim in _map_patches(run_patch, self.mesh.n_vertices,
                                           workers):
            for i in range(n_rhs):
                coeffs[i][contribs[i].rt_dofs] += contribs[i].total
            if setups is not None:
                setups.append(slim)

        for _ in range(sweeps):
            for setup in setups:
                for i in range(n_rhs):
                    self._sweep_patch(setup, coeffs[i], flux_vals[i])

        return EquilibratedField(
            fluxes=[DiscreteFunction(self.Vrt, c) for c in coeffs]
        )

    def _sweep_patch(self, setup, coef, flux_vals):
        """One patch update of the global objective ||sigma_R - theta||:
        add the curl field minimizing the distance of the current summed
        reconstruction to the projected flux over the patch."""
        vals = self._patch_field_values(setup, coef[setup["rt_gids"]])
        target = vals - flux_vals[setup["cells"]]
        lloc = -np.einsum(
            "c,q,cqi,cqni->cn", setup["wdetJ"], self.wts, target, setup["curlG"]
        )
        L = np.zeros(len(setup["psi_gids"]))
        np.add.at(L, setup["P_psi"].ravel(), lloc.ravel())
        delta = sla.cho_solve(setup["A_factor"], setup["Q"].T @ L)
        coef[setup["rt_gids"]] += self._curl_to_patch_values(
            setup, setup["Q"] @ delta
        )


def _map_patches(fn, n_vertices, workers):
    """Yield fn(z) for z = 0..n_vertices-1 in order, optionally computing
    the patches on a thread pool. Batching bounds the number of results
    held in flight on fine meshes."""
    if workers <= 1:
        yield from map(fn, range(n_vertices))
        return
    batch = 1024
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for start in range(0, n_vertices, batch):
            yield from pool.map(fn, range(start, min(start + batch, n_vertices)))


def equilibrate(
    mesh: Mesh,
    fluxes,
    rhs,
    m: int,
    *,
    neumann=None,
    weak_symmetry: bool = False,
    dirichlet_facets=None,
    primal_degree: Optional[int] = None,
    weights=None,
    sweeps: int = 0,
    workers: int = 1,
) -> EquilibratedField:
    """Equilibrate fluxes (or weakly symmetric stress rows) on the mesh.

    primal_degree, when given, must not exceed m. weights (per cell) selects
    the norm of the patch minimization; pass 1/kappa for diffusion problems
    with discontinuous coefficients.
    """
    if primal_degree is not None and m < primal_degree:
        raise EquilibrationError(
            f"equilibration degree m={m} below primal degree k={primal_degree}"
        )
    if weak_symmetry and primal_degree is not None and primal_degree < 2:
        raise EquilibrationError("weak symmetry requires k >= 2")
    eq = Equilibrator(mesh, m, dirichlet_facets=dirichlet_facets, weights=weights)
    return eq.equilibrate(
        fluxes, rhs, neumann=neumann, weak_symmetry=weak_symmetry,
        sweeps=sweeps, workers=workers,
    )
