import numpy as np
import pytest

from equilibra.quadrature import interval_rule, triangle_rule


def monomial_integral_triangle(a, b):
    # int_T x^a y^b = a! b! / (a + b + 2)!
    from math import factorial

    return factorial(a) * factorial(b) / factorial(a + b + 2)


@pytest.mark.parametrize("degree", range(0, 13))
def test_triangle_rule_exact_for_monomials(degree):
    pts, wts = triangle_rule(degree)
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            val = np.sum(wts * pts[:, 0] ** a * pts[:, 1] ** b)
            assert val == pytest.approx(monomial_integral_triangle(a, b), abs=1e-13)


def test_triangle_rule_weights_sum_to_area():
    _, wts = triangle_rule(4)
    assert np.sum(wts) == pytest.approx(0.5, abs=1e-14)


@pytest.mark.parametrize("degree", range(0, 12))
def test_interval_rule_exact(degree):
    x, w = interval_rule(degree)
    for a in range(degree + 1):
        assert np.sum(w * x**a) == pytest.approx(1.0 / (a + 1), abs=1e-14)
