"""Quadrature rules on the reference triangle and the unit interval.

Triangle rules are built by collapsing a Gauss-Legendre x Gauss-Jacobi
tensor product (Duffy transform), which integrates bivariate polynomials
of the requested total degree exactly.
"""

from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi


@lru_cache(maxsize=None)
def interval_rule(degree: int):
    """Gauss-Legendre points/weights on [0, 1], exact up to `degree`."""
    n = degree // 2 + 1
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def triangle_rule(degree: int):
    """Quadrature on the reference triangle {x,y >= 0, x+y <= 1}.

    Returns (points, weights) with points of shape (nq, 2); weights sum
    to the triangle area 1/2. Exact for polynomials of total degree
    <= `degree`.
    """
    n = degree // 2 + 1
    xg, wg = np.polynomial.legendre.leggauss(n)      # for the x-direction
    xj, wj = roots_jacobi(n, 1.0, 0.0)               # weight (1-y) absorbed
    xg = 0.5 * (xg + 1.0)
    wg = 0.5 * wg
    xj = 0.5 * (xj + 1.0)
    wj = 0.5 * wj * 0.5  # jacobi weight normalization: (1-t)/2 on [-1,1] -> factor 1/2

    pts = np.empty((n * n, 2))
    wts = np.empty(n * n)
    k = 0
    for a, wa in zip(xj, wj):
        for b, wb in zip(xg, wg):
            # Duffy: (a, b) in [0,1]^2 -> (x, y) = (b * (1 - a), a)
            pts[k] = (b * (1.0 - a), a)
            wts[k] = wa * wb
            k += 1
    return pts, wts
