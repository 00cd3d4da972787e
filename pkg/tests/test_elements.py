import numpy as np
import pytest

from equilibra import elements as el
from equilibra.quadrature import interval_rule, triangle_rule


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_lagrange_partition_of_unity(k):
    elem = el.LagrangeElement(k)
    pts, _ = triangle_rule(6)
    vals, grads = el.tabulate(elem, pts)
    assert np.allclose(vals.sum(axis=1), 1.0, atol=1e-12)
    assert np.allclose(grads.sum(axis=1), 0.0, atol=1e-12)


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_lagrange_unisolvence(k):
    elem = el.LagrangeElement(k)
    vals, _ = el.tabulate(elem, elem.nodes)
    assert np.allclose(vals, np.eye(elem.dim), atol=1e-10)


def test_lagrange_p1_barycenter():
    elem = el.LagrangeElement(1)
    vals, _ = el.tabulate(elem, [[1 / 3, 1 / 3]])
    assert np.allclose(vals, 1 / 3, atol=1e-14)


def test_disc_lagrange_p0_constant():
    elem = el.LagrangeElement(0, discontinuous=True)
    vals, _ = el.tabulate(elem, [[0.2, 0.3]])
    assert vals.shape == (1, 1)
    assert vals[0, 0] == pytest.approx(1.0, abs=1e-14)


def test_unsupported_degrees_raise():
    with pytest.raises(el.ElementError):
        el.LagrangeElement(5)
    with pytest.raises(el.ElementError):
        el.RTElement(0)
    with pytest.raises(el.ElementError):
        el.RTElement(5)


@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_rt_dimension(m):
    elem = el.RTElement(m)
    assert elem.dim == m * (m + 2)
    data_vals, data_divs = el.tabulate(elem, [[0.25, 0.25]])
    assert data_vals.shape == (1, elem.dim, 2)
    assert data_divs.shape == (1, elem.dim)


@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_rt_facet_trace_duality(m):
    """Facet basis function (e, j) has normal trace Legendre_j on facet e and
    zero trace on the other facets; interior functions have zero trace."""
    elem = el.RTElement(m)
    xq, _ = interval_rule(8)
    for e in range(3):
        a, b = el.REF_FACET_VERTICES[e]
        pa, pb = el.REF_VERTICES[a], el.REF_VERTICES[b]
        pts = pa[None, :] + np.outer(xq, pb - pa)
        vals, _ = el.tabulate(elem, pts)
        ntr = vals @ el.REF_FACET_NORMALS[e]  # (npts, dim)
        for i in range(elem.dim):
            expect = np.zeros_like(xq)
            if i < 3 * m and i // m == e:
                expect = el.shifted_legendre(i % m)(xq)
            assert np.allclose(ntr[:, i], expect, atol=1e-9), (m, e, i)


@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_rt_divfree_block(m):
    elem = el.RTElement(m)
    pts, _ = triangle_rule(8)
    _, divs = el.tabulate(elem, pts)
    for i in elem.divfree_interior_dofs:
        assert np.allclose(divs[:, i], 0.0, atol=1e-12)
    # div-carrying interior block has linearly independent divergences
    D = divs[:, elem.div_interior_dofs]
    if D.shape[1]:
        s = np.linalg.svd(D, compute_uv=False)
        assert s[-1] > 1e-8


@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_rt_dof_functionals_identity(m):
    elem = el.RTElement(m)
    data_pts = None
    I = []
    for i in range(elem.dim):
        def basis_i(p, i=i):
            vals, _ = elem.tabulate(np.atleast_2d(p))
            return vals[0, i]

        I.append(elem.dof_functionals(basis_i))
    assert np.allclose(np.array(I), np.eye(elem.dim), atol=1e-10)


@pytest.mark.parametrize("m", [1, 2, 3])
def test_rt_interpolation_reproduces_rt_fields(m):
    elem = el.RTElement(m)
    rng = np.random.default_rng(7)
    c = rng.standard_normal(elem.dim)

    def field(p):
        vals, _ = elem.tabulate(np.atleast_2d(p))
        return vals[0].T @ c

    c2 = elem.dof_functionals(field)
    assert np.allclose(c2, c, atol=1e-10)


def test_rt1_facet_basis_constant_trace():
    elem = el.RTElement(1)
    xq, wq = interval_rule(4)
    for e in range(3):
        a, b = el.REF_FACET_VERTICES[e]
        pa, pb = el.REF_VERTICES[a], el.REF_VERTICES[b]
        pts = pa[None, :] + np.outer(xq, pb - pa)
        vals, _ = el.tabulate(elem, pts)
        ntr = vals @ el.REF_FACET_NORMALS[e]
        # own facet: constant 1 trace; others: zero mean (here exactly zero)
        assert np.allclose(ntr[:, e], 1.0, atol=1e-12)
        for other in range(3):
            if other != e:
                assert abs(np.sum(wq * ntr[:, other])) < 1e-12
