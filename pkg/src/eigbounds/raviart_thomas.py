"""Raviart-Thomas elements RT_p(K) = [P_p]^2 + x P_p on affine triangles.

Degrees of freedom on a triangle, in this order:

* for each local edge ``j`` (opposite vertex ``j``): the moments
  ``int_E q . n_E L_k ds``, ``k = 0..p``, where ``n_E`` is the global edge
  normal and ``L_k`` the Legendre polynomials on [0, 1] following the
  global edge orientation;
* interior moments ``int_K q . e_c m dx`` against scaled monomials ``m`` of
  degree at most ``p - 1`` (components ``c = 0, 1`` for each monomial).

Because edge DOFs refer to the global normal, two triangles sharing an edge
produce the same normal trace whenever they share the edge DOF values, so a
global field is H(div) conforming by construction.

Shape functions are expressed in scaled local coordinates
``xi = (x - centroid) / h_K`` and obtained by inverting the DOF matrix of a
spanning set, batched over all triangles.
"""

from __future__ import annotations

from functools import partial

import numpy as np

from .mesh import Mesh
from .quadrature import line_rule, triangle_rule

_einsum = partial(np.einsum, optimize=True)


def monomial_exponents(degree: int) -> list[tuple[int, int]]:
    return [(a, d - a) for d in range(degree + 1) for a in range(d, -1, -1)]


def monomials(degree: int, xi) -> tuple[np.ndarray, np.ndarray]:
    """Monomials of total degree <= ``degree`` in xi: values (..., n) and xi-gradients (..., n, 2)."""
    x, y = xi[..., 0], xi[..., 1]
    vals, grads = [], []
    for a, b in monomial_exponents(degree):
        vals.append(x**a * y**b)
        gx = a * x ** max(a - 1, 0) * y**b if a else np.zeros_like(x)
        gy = b * x**a * y ** max(b - 1, 0) if b else np.zeros_like(x)
        grads.append(np.stack([gx, gy], axis=-1))
    if not vals:
        return np.zeros(xi.shape[:-1] + (0,)), np.zeros(xi.shape[:-1] + (0, 2))
    return np.stack(vals, axis=-1), np.stack(grads, axis=-2)


def n_polynomials(degree: int) -> int:
    return (degree + 1) * (degree + 2) // 2


def legendre01(degree: int, t) -> np.ndarray:
    """Legendre polynomials on [0, 1], columns k = 0..degree."""
    return np.polynomial.legendre.legvander(2.0 * np.asarray(t, float) - 1.0, degree)


def _spanning(p: int, xi, h):
    """Spanning set of RT_p in xi: values (..., n, 2) and physical divergence (..., n)."""
    m, gm = monomials(p, xi)
    hom = [(a, p - a) for a in range(p, -1, -1)]
    x, y = xi[..., 0], xi[..., 1]
    zero = np.zeros_like(m[..., 0])
    vals, divs = [], []
    for i in range(m.shape[-1]):
        vals.append(np.stack([m[..., i], zero], axis=-1))
        divs.append(gm[..., i, 0])
        vals.append(np.stack([zero, m[..., i]], axis=-1))
        divs.append(gm[..., i, 1])
    for a, b in hom:
        mt = x**a * y**b
        vals.append(np.stack([x * mt, y * mt], axis=-1))
        divs.append((p + 2) * mt)
    h = np.asarray(h)[(...,) + (None,) * (xi.ndim - h.ndim - 1)] if np.ndim(h) else h
    vals = np.stack(vals, axis=-2)
    divs = np.stack(divs, axis=-1) / (h[..., None] if np.ndim(h) else h)
    return vals, divs


class RaviartThomasSpace:
    """Element bases of RT_p on every triangle of a mesh."""

    def __init__(self, mesh: Mesh, degree: int):
        self.mesh = mesh
        self.degree = p = degree
        self.n_edge = p + 1
        self.n_local = (p + 1) * (p + 3)
        self.n_interior = self.n_local - 3 * self.n_edge
        pts = mesh.vertices[mesh.triangles]
        self.centroids = pts.mean(axis=1)
        self.scales = mesh.diameters.copy()

        m = mesh.n_triangles
        n = self.n_local
        D = np.zeros((m, n, n))
        t, w = line_rule(2 * p + 2)
        L = legendre01(p, t)
        for j in range(3):
            e = mesh.tri_edges[:, j]
            v0 = mesh.vertices[mesh.edges[e, 0]]
            v1 = mesh.vertices[mesh.edges[e, 1]]
            x = v0[:, None, :] + t[None, :, None] * (v1 - v0)[:, None, :]
            S, _ = _spanning(p, self.to_local(np.arange(m), x), self.scales[:, None])
            sn = _einsum("mqnx,mx->mqn", S, mesh.edge_normals[e])
            D[:, j * self.n_edge:(j + 1) * self.n_edge, :] = (
                mesh.edge_lengths[e][:, None, None] * _einsum("q,qk,mqn->mkn", w, L, sn)
            )
        if self.n_interior:
            ref, wq = triangle_rule(2 * p + 2)
            x = self.map_points(ref)
            xi = self.to_local(np.arange(m), x)
            S, _ = _spanning(p, xi, self.scales[:, None])
            mono, _ = monomials(p - 1, xi)
            det = 2.0 * mesh.areas
            rows = _einsum("q,mqa,mqnc->macn", wq, mono, S) * det[:, None, None, None]
            D[:, 3 * self.n_edge:, :] = rows.reshape(m, -1, n)
        self.coefficients = np.linalg.inv(D)

    def map_points(self, ref, elements=None) -> np.ndarray:
        mesh = self.mesh
        if elements is None:
            elements = np.arange(mesh.n_triangles)
        p = mesh.vertices[mesh.triangles[elements]]
        J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)
        return p[:, 0][:, None, :] + _einsum("kxr,qr->kqx", J, np.asarray(ref, float))

    def to_local(self, elements, x) -> np.ndarray:
        """Physical points (k, Q, 2) to scaled local coordinates."""
        c = self.centroids[elements][:, None, :]
        return (x - c) / self.scales[elements][:, None, None]

    def basis(self, elements, x):
        """Shape functions at physical points ``x`` (k, Q, 2).

        Returns values (k, Q, n, 2) and divergences (k, Q, n).
        """
        xi = self.to_local(elements, x)
        S, dS = _spanning(self.degree, xi, self.scales[elements][:, None])
        C = self.coefficients[elements]
        vals = np.matmul(np.swapaxes(S, -1, -2), C[:, None]).swapaxes(-1, -2)
        return vals, np.matmul(dS, C)

    def reference_basis(self, ref, elements=None):
        """:meth:`basis` at reference points (Q, 2) of ``elements`` (default all)."""
        if elements is None:
            elements = np.arange(self.mesh.n_triangles)
        return self.basis(elements, self.map_points(ref, elements))

    def polynomial_basis(self, elements, x, degree=None) -> np.ndarray:
        """Scaled monomials of degree <= ``degree`` (default p) at physical points."""
        degree = self.degree if degree is None else degree
        vals, _ = monomials(degree, self.to_local(elements, x))
        return vals


def rt_space(mesh: Mesh, degree: int) -> RaviartThomasSpace:
    """Cached :class:`RaviartThomasSpace` for a mesh."""
    # stored on the mesh itself so the spaces are freed together with it
    per_mesh = mesh.__dict__.setdefault("_rt_spaces", {})
    if degree not in per_mesh:
        per_mesh[degree] = RaviartThomasSpace(mesh, degree)
    return per_mesh[degree]
