"""Reference elements on the unit triangle.

Families: continuous Lagrange(k), discontinuous Lagrange(q) and a
hierarchic Raviart-Thomas RT(m) whose basis is organized as

* facet functions dual to Legendre normal moments of degree 0..m-1,
* interior functions carrying the divergence, and
* an explicitly divergence-free interior set (curls of cell bubbles),

so that patch-wise divergence-free subspaces are available without
solving constraints. RT(m) has dimension m*(m+2); m=1 is the lowest
order space.

Reference triangle: vertices (0,0), (1,0), (0,1); local facet j is the
edge opposite vertex j, parametrized from its lower to its higher local
vertex id.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.legendre import Legendre

from equilibra.quadrature import interval_rule, triangle_rule


class ElementError(ValueError):
    """Unsupported element family or degree."""


# --- monomial helpers -------------------------------------------------------

def monomials(deg):
    """Exponent pairs (a, b) of the monomial basis of P_deg, graded lex."""
    return [(a, b) for t in range(deg + 1) for a in range(t, -1, -1) for b in (t - a,)]


def mono_eval(exps, points):
    """Evaluate monomials at points -> (npts, nmono)."""
    pts = np.atleast_2d(points)
    out = np.empty((len(pts), len(exps)))
    for k, (a, b) in enumerate(exps):
        out[:, k] = pts[:, 0] ** a * pts[:, 1] ** b
    return out


def mono_diff(exps_in, exps_out, axis):
    """Matrix of d/dx (axis=0) or d/dy (axis=1): coeffs_in -> coeffs_out."""
    index = {e: i for i, e in enumerate(exps_out)}
    D = np.zeros((len(exps_out), len(exps_in)))
    for k, (a, b) in enumerate(exps_in):
        if axis == 0 and a > 0:
            D[index[(a - 1, b)], k] = a
        if axis == 1 and b > 0:
            D[index[(a, b - 1)], k] = b
    return D


def _poly_product_coeffs(exps_small, factor_exps_coeffs, exps_big):
    """Multiply each monomial in exps_small by a fixed polynomial.

    `factor_exps_coeffs` is a list of ((a, b), coeff) terms. Returns the
    matrix mapping coefficients over exps_small to coefficients over
    exps_big.
    """
    index = {e: i for i, e in enumerate(exps_big)}
    M = np.zeros((len(exps_big), len(exps_small)))
    for k, (a, b) in enumerate(exps_small):
        for (fa, fb), c in factor_exps_coeffs:
            M[index[(a + fa, b + fb)], k] += c
    return M


# --- Lagrange ----------------------------------------------------------------

REF_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
# local facet j opposite vertex j, endpoints in ascending local-vertex order
REF_FACET_VERTICES = [(1, 2), (0, 2), (0, 1)]
REF_FACET_NORMALS = np.array(
    [[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]
) / np.array([[np.sqrt(2.0)], [1.0], [1.0]])
REF_FACET_LENGTHS = np.array([np.sqrt(2.0), 1.0, 1.0])


def _lagrange_nodes(k):
    """Reference nodes: vertices, then per-facet edge nodes (along the facet
    direction), then interior nodes."""
    nodes = [tuple(v) for v in REF_VERTICES]
    for a, b in REF_FACET_VERTICES:
        pa, pb = REF_VERTICES[a], REF_VERTICES[b]
        for i in range(1, k):
            nodes.append(tuple(pa + (pb - pa) * i / k))
    for i in range(1, k):
        for j in range(1, k - i):
            nodes.append((i / k, j / k))
    return np.array(nodes)


@dataclass(frozen=True)
class LagrangeElement:
    degree: int
    discontinuous: bool = False

    def __post_init__(self):
        if self.discontinuous:
            if not 0 <= self.degree <= 4:
                raise ElementError(f"DiscLagrange degree {self.degree} unsupported")
        elif not 1 <= self.degree <= 4:
            raise ElementError(f"Lagrange degree {self.degree} unsupported")

    @property
    def family(self):
        return "DiscLagrange" if self.discontinuous else "Lagrange"

    @property
    def dim(self):
        return (self.degree + 1) * (self.degree + 2) // 2

    @property
    def nodes(self):
        return _lagrange_data(self.degree)[0]

    def tabulate(self, points):
        """Basis values and gradients -> (npts, dim), (npts, dim, 2)."""
        nodes, C, exps = _lagrange_data(self.degree)
        pts = np.atleast_2d(points)
        vals = mono_eval(exps, pts) @ C.T
        dx = mono_diff(exps, exps, 0)
        dy = mono_diff(exps, exps, 1)
        E = mono_eval(exps, pts)
        grads = np.stack([E @ dx @ C.T, E @ dy @ C.T], axis=-1)
        return vals, grads


@lru_cache(maxsize=None)
def _lagrange_data(k):
    if k == 0:
        nodes = np.array([[1.0 / 3.0, 1.0 / 3.0]])
    else:
        nodes = _lagrange_nodes(k)
    exps = monomials(k)
    V = mono_eval(exps, nodes)
    C = np.linalg.inv(V)  # C[k_mono, i_basis]: basis_i = sum_k C[k,i] mono_k
    return nodes, C.T, exps  # return C transposed: rows = basis functions


def shifted_legendre(j):
    return Legendre.basis(j, domain=[0.0, 1.0])


# --- hierarchic Raviart-Thomas ----------------------------------------------

@dataclass(frozen=True)
class RTElement:
    """Hierarchic RT(m) with facet / divergence-carrying / divergence-free
    basis blocks; see module docstring."""

    degree: int

    def __post_init__(self):
        if not 1 <= self.degree <= 4:
            raise ElementError(f"RT degree {self.degree} unsupported")

    @property
    def family(self):
        return "RaviartThomasHier"

    @property
    def dim(self):
        m = self.degree
        return m * (m + 2)

    @property
    def n_facet_dofs(self):
        return self.degree  # per facet

    def facet_dofs(self, facet):
        m = self.degree
        return list(range(facet * m, (facet + 1) * m))

    @property
    def interior_dofs(self):
        m = self.degree
        return list(range(3 * m, m * (m + 2)))

    @property
    def div_interior_dofs(self):
        m = self.degree
        return list(range(3 * m, 3 * m + (m - 1) * (m + 2) // 2))

    @property
    def divfree_interior_dofs(self):
        m = self.degree
        start = 3 * m + (m - 1) * (m + 2) // 2
        return list(range(start, m * (m + 2)))

    def tabulate(self, points):
        """Values and divergences -> (npts, dim, 2), (npts, dim)."""
        data = _rt_data(self.degree)
        pts = np.atleast_2d(points)
        E = mono_eval(data.exps, pts)
        vals = np.stack([E @ data.coeffs[:, 0].T, E @ data.coeffs[:, 1].T], axis=1)
        vals = np.moveaxis(vals, 1, 2)  # (npts, dim, 2)
        Ed = mono_eval(data.exps_div, pts)
        divs = Ed @ data.div_coeffs.T
        return vals, divs

    def facet_trace(self):
        """Normal-trace coefficients in the shifted-Legendre basis.

        Returns (3, dim, m): trace of basis function i on facet e w.r.t. the
        reference outward normal, expanded in L0..L_{m-1} of the facet
        parameter.
        """
        return _rt_data(self.degree).trace

    def dof_functionals(self, func):
        """Apply the element's DOF functionals to a vector field callable."""
        data = _rt_data(self.degree)
        moments = _rt_moments(self.degree, func)
        return data.inv_moment_matrix @ moments


class _RTData:
    pass


def _rt_moments(m, func):
    """Original moment functionals (facet Legendre moments + interior
    moments against P_{m-2}^2) applied to a callable field."""
    xq, wq = interval_rule(4 * m + 2)
    pq, pw = triangle_rule(4 * m + 2)
    vals_cell = np.asarray([func(p) for p in pq])  # (nq, 2)
    moments = []
    for e in range(3):
        a, b = REF_FACET_VERTICES[e]
        pa, pb = REF_VERTICES[a], REF_VERTICES[b]
        pts = pa[None, :] + np.outer(xq, pb - pa)
        fvals = np.asarray([func(p) for p in pts]) @ REF_FACET_NORMALS[e]
        for j in range(m):
            Lj = shifted_legendre(j)(xq)
            moments.append((2 * j + 1) * np.sum(wq * fvals * Lj))
    if m >= 2:
        exps = monomials(m - 2)
        E = mono_eval(exps, pq)
        for k in range(len(exps)):
            for c in range(2):
                moments.append(np.sum(pw * vals_cell[:, c] * E[:, k]))
    return np.array(moments)


@lru_cache(maxsize=None)
def _rt_data(m):
    exps_lo = monomials(m - 1)          # P_{m-1}
    exps = monomials(m)                 # container space P_m (componentwise)
    nlo = len(exps_lo)
    dim = m * (m + 2)
    index = {e: i for i, e in enumerate(exps)}

    # modal spanning set: (p, 0), (0, p) for p in P_{m-1}; x * q for
    # homogeneous q of degree m-1
    modal = np.zeros((dim, 2, len(exps)))
    k = 0
    for a, b in exps_lo:
        modal[k, 0, index[(a, b)]] = 1.0
        k += 1
        modal[k, 1, index[(a, b)]] = 1.0
        k += 1
    for a, b in exps_lo:
        if a + b == m - 1:
            modal[k, 0, index[(a + 1, b)]] = 1.0
            modal[k, 1, index[(a, b + 1)]] = 1.0
            k += 1
    assert k == dim

    # L2-orthonormalize the modal set (monomials are badly conditioned)
    pq0, pw0 = triangle_rule(4 * m + 2)
    E0 = mono_eval(exps, pq0)
    vx = modal[:, 0] @ E0.T
    vy = modal[:, 1] @ E0.T
    G = (vx * pw0[None, :]) @ vx.T + (vy * pw0[None, :]) @ vy.T
    L = np.linalg.cholesky(G)
    modal = np.einsum("ik,kcm->icm", np.linalg.inv(L), modal)

    # divergence of the modal set (coefficients over P_{m-1})
    dx = mono_diff(exps, exps_lo, 0)
    dy = mono_diff(exps, exps_lo, 1)
    modal_div = modal[:, 0] @ dx.T + modal[:, 1] @ dy.T

    # moment functionals applied to the modal set
    xq, wq = interval_rule(4 * m + 2)
    pq, pw = triangle_rule(4 * m + 2)
    E_cell = mono_eval(exps, pq)
    rows = []
    for e in range(3):
        a, b = REF_FACET_VERTICES[e]
        pa, pb = REF_VERTICES[a], REF_VERTICES[b]
        pts = pa[None, :] + np.outer(xq, pb - pa)
        E_edge = mono_eval(exps, pts)
        # normal trace of modal function i at edge points
        tr = modal[:, 0] @ E_edge.T * REF_FACET_NORMALS[e, 0] + \
             modal[:, 1] @ E_edge.T * REF_FACET_NORMALS[e, 1]
        for j in range(m):
            Lj = shifted_legendre(j)(xq)
            rows.append((2 * j + 1) * (tr * (wq * Lj)[None, :]).sum(axis=1))
    if m >= 2:
        exps_int = monomials(m - 2)
        E_int = mono_eval(exps_int, pq)
        vals_x = modal[:, 0] @ E_cell.T
        vals_y = modal[:, 1] @ E_cell.T
        for kk in range(len(exps_int)):
            for comp_vals in (vals_x, vals_y):
                rows.append((comp_vals * (pw * E_int[:, kk])[None, :]).sum(axis=1))
    V = np.array(rows)  # (dim, dim): V[j, i] = func_j(modal_i)

    # dual basis: N_i = sum_k C[i, k] modal_k with func_j(N_i) = delta_ij
    C = np.linalg.inv(V).T
    basis = np.einsum("ik,kcm->icm", C, modal)
    basis_div = C @ modal_div

    # hierarchic interior split
    n_int = m * (m - 1)
    n_div = (m - 1) * (m + 2) // 2
    n_free = (m - 1) * (m - 2) // 2
    facet_idx = list(range(3 * m))
    int_idx = list(range(3 * m, dim))

    # divergence-free interior set: curls of x*y*(1-x-y) * P_{m-3}
    free_fns = []
    if n_free > 0:
        exps_b = monomials(m - 3)
        exps_p = monomials(m + 1)
        bubble = [((1, 1), 1.0), ((2, 1), -1.0), ((1, 2), -1.0)]  # xy(1-x-y)
        Mb = _poly_product_coeffs(exps_b, bubble, exps_p)
        dxp = mono_diff(exps_p, exps, 0)
        dyp = mono_diff(exps_p, exps, 1)
        for kk in range(len(exps_b)):
            coeff_b = np.zeros(len(exps_b))
            coeff_b[kk] = 1.0
            phi = Mb @ coeff_b
            w = np.zeros((2, len(exps)))
            w[0] = dyp @ phi        # curl = (d/dy, -d/dx)
            w[1] = -(dxp @ phi)
            wx = w[0] @ E0.T
            wy = w[1] @ E0.T
            w /= np.sqrt(np.sum(pw0 * (wx**2 + wy**2)))
            free_fns.append(w)

    # divergence-carrying subset of the interior dual functions: choose
    # n_div of them with linearly independent divergences (pivoted QR)
    div_block = basis_div[int_idx]  # (n_int, nlo)
    if n_int > 0:
        _, _, piv = _qr_pivot(div_block.T)
        chosen = [int_idx[p] for p in piv[:n_div]]
    else:
        chosen = []

    final = [basis[i] for i in facet_idx] + [basis[i] for i in chosen] + free_fns
    coeffs = np.array(final)  # (dim, 2, nmono)
    div_coeffs = coeffs[:, 0] @ dx.T + coeffs[:, 1] @ dy.T

    # facet traces in the shifted-Legendre basis (exact by construction)
    trace = np.zeros((3, dim, m))
    for e in range(3):
        for j in range(m):
            trace[e, e * m + j, j] = 1.0

    # moment matrix of the final basis (for interpolation). The facet-moment
    # block is exact by construction (facet duals are trace-orthonormal, all
    # interior functions are trace-free); interior moments by quadrature.
    moment_matrix = np.zeros((dim, dim))  # M[i, j] = func_j(final_i)
    moment_matrix[: 3 * m, : 3 * m] = np.eye(3 * m)
    if m >= 2:
        exps_int = monomials(m - 2)
        E_int = mono_eval(exps_int, pq)
        fx = coeffs[:, 0] @ E_cell.T
        fy = coeffs[:, 1] @ E_cell.T
        for kk in range(len(exps_int)):
            wk = pw * E_int[:, kk]
            moment_matrix[:, 3 * m + 2 * kk] = fx @ wk
            moment_matrix[:, 3 * m + 2 * kk + 1] = fy @ wk

    data = _RTData()
    data.exps = exps
    data.exps_div = exps_lo
    data.coeffs = coeffs
    data.div_coeffs = div_coeffs
    data.trace = trace
    data.inv_moment_matrix = np.linalg.inv(moment_matrix.T)
    return data


def _qr_pivot(A):
    from scipy.linalg import qr

    return qr(A, pivoting=True, mode="economic")


def make_element(family, degree):
    """Factory: 'Lagrange' | 'DiscLagrange' | 'RaviartThomasHier'."""
    if family == "Lagrange":
        return LagrangeElement(degree)
    if family == "DiscLagrange":
        return LagrangeElement(degree, discontinuous=True)
    if family == "RaviartThomasHier":
        return RTElement(degree)
    raise ElementError(f"unknown family {family!r}")


def tabulate(element, points):
    """Tabulate basis values (+ gradients or divergences) at reference points."""
    pts = np.atleast_2d(points)
    if np.any(pts < -1e-12) or np.any(pts.sum(axis=1) > 1 + 1e-12):
        raise ElementError("points outside the reference triangle")
    return element.tabulate(pts)
