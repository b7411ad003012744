"""Quadrature rules on the reference triangle and the unit interval.

The triangle rules are collapsed (Duffy) tensor products of Gauss-Legendre
rules. They are exact for polynomials up to the requested total degree,
which is all the assembly and estimation code needs: every integrand is
polynomial because coefficients are piecewise constant.
"""

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def line_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule on [0, 1] exact up to ``degree``.

    Returns
    -------
    points : (n,) array
    weights : (n,) array, summing to 1
    """
    n = max(1, degree // 2 + 1)
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Rule on the reference triangle (0,0), (1,0), (0,1), exact up to ``degree``.

    Returns
    -------
    points : (n, 2) array of reference coordinates
    weights : (n,) array, summing to 1/2 (the reference area)
    """
    # the Duffy map adds one degree in the collapsed direction
    s, ws = line_rule(degree + 1)
    t, wt = line_rule(degree)
    S, T = np.meshgrid(s, t, indexing="ij")
    W = np.outer(ws, wt)
    xi = S
    eta = (1.0 - S) * T
    weights = W * (1.0 - S)
    return np.column_stack([xi.ravel(), eta.ravel()]), weights.ravel()
