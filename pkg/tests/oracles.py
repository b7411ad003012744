"""Independent reference computations used by the tests.

Each oracle solves its problem by a different route than the library:
dense Cholesky reduction for eigenvalues, an enriched Galerkin solve for the
residual representative, and a null-space least-squares formulation for the
patch problems.
"""

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from eigbounds.fem import FeSpace, assemble_forms, prolong, _barycentric
from eigbounds.flux import _matrices
from eigbounds.mesh import EDGE_NEUMANN, uniform_refine
from eigbounds.quadrature import line_rule, triangle_rule
from eigbounds.raviart_thomas import legendre01, rt_space


def dense_eigenvalues(K, M, count):
    """Smallest eigenvalues of K x = lam M x via Cholesky of M and numpy eigvalsh."""
    Kd, Md = K.toarray(), M.toarray()
    L = np.linalg.cholesky(Md)
    Li = np.linalg.inv(L)
    C = Li @ Kd @ Li.T
    return np.sort(np.linalg.eigvalsh(0.5 * (C + C.T)))[:count]


def residual_representative_norm(space, coeffs, pair, refinements=2):
    """||w~||_a for w~ solving a(w, v) = a(u, v) - lam b(u, v) on an enriched space.

    The enriched space uses ``refinements`` rounds of uniform bisection and
    degree p + 1, capped at the highest supported degree 2.
    """
    fine_mesh = uniform_refine(space.mesh, refinements)
    fine = FeSpace(fine_mesh, min(space.degree + 1, 2))
    forms = assemble_forms(fine, coeffs)
    # uniform_refine composes parent maps, so prolong goes straight to the fine mesh
    u = prolong(space, pair.vector, fine)[fine.free_dofs]
    rhs = forms.stiffness @ u - pair.value * (forms.mass @ u)
    w = spla.spsolve(forms.stiffness.tocsc(), rhs)
    return float(np.sqrt(w @ (forms.stiffness @ w)))


def patch_least_squares(space, coeffs, pair, vertex):
    """Patch flux as the constrained minimizer of ||psi grad u - A^{-1} s||_A.

    Works on element-wise RT DOFs with explicit equality constraints
    (shared normal moments, prescribed boundary moments, divergence) and
    minimizes over the null space of the constraints.

    Returns the (k, n) element DOFs of the minimizer, with the patch
    elements in increasing order.
    """
    mesh = space.mesh
    p = space.degree
    rt = rt_space(mesh, p)
    n, ne = rt.n_local, rt.n_edge
    els = np.sort(mesh.vertex_triangles(vertex))
    k = els.size
    A = coeffs.element_diffusion(mesh)[els]
    mass, div, _ = _matrices(rt, A, els)

    u = space.expand(pair.vector)
    lam = pair.value
    ref, w = triangle_rule(2 * p + 3)
    x = rt.map_points(ref, els)
    phi, _ = rt.basis(els, x)
    v = rt.polynomial_basis(els, x)
    uq, gu = space.element_values(u, ref, els)
    lv = np.argmax(mesh.triangles[els] == vertex, axis=1)
    bary = _barycentric(ref)[:, lv].T
    gpsi = space.bary_gradients[els, lv]
    Ael = coeffs.element_diffusion(mesh)[els]
    c = coeffs.element_reaction(mesh)[els][:, None]
    b1 = coeffs.element_weight(mesh)[els][:, None]
    r = (lam * b1 - c) * bary * uq - np.einsum("kx,kxy,kqy->kq", gpsi, Ael, gu)
    det = 2.0 * mesh.areas[els][:, None]
    F = np.einsum("q,kq,kq,kqx,kqix->ki", w, det, bary, gu, phi)
    R = np.einsum("q,kq,kq,kqa->ka", w, det, r, v)

    N = k * n
    rows, rhs = [], []

    def constraint(coef, value):
        rows.append(coef)
        rhs.append(value)

    seen = {}
    for i, K in enumerate(els):
        for j in range(3):
            e = int(mesh.tri_edges[K, j])
            a, b = mesh.edges[e]
            cols = i * n + j * ne + np.arange(ne)
            if vertex not in (a, b):
                for cidx in cols:
                    row = np.zeros(N)
                    row[cidx] = 1.0
                    constraint(row, 0.0)
            elif mesh.edge_kind[e] == EDGE_NEUMANN:
                t, wt = line_rule(2 * p + 4)
                ue = space.edge_values(u, t, np.array([e]))[0]
                psi = 1.0 - t if a == vertex else t
                g = (lam * coeffs.edge_weight(mesh)[e] - coeffs.edge_robin(mesh)[e]) * psi * ue
                mom = mesh.boundary_signs[e] * mesh.edge_lengths[e] * (legendre01(p, t).T @ (wt * g))
                for cidx, val in zip(cols, mom):
                    row = np.zeros(N)
                    row[cidx] = 1.0
                    constraint(row, val)
            elif e in seen:
                for c0, c1 in zip(seen[e], cols):
                    row = np.zeros(N)
                    row[c0], row[c1] = 1.0, -1.0
                    constraint(row, 0.0)
            else:
                seen[e] = cols
        blk = np.zeros((div.shape[1], N))
        blk[:, i * n:(i + 1) * n] = div[i]
        for row, val in zip(blk, -R[i]):
            constraint(row, val)

    C = np.array(rows)
    d = np.array(rhs)
    x0, *_ = sla.lstsq(C, d)
    if np.linalg.norm(C @ x0 - d) > 1e-9 * max(1.0, np.linalg.norm(d)):
        raise AssertionError("inconsistent patch constraints")
    Z = sla.null_space(C)
    Mb = sla.block_diag(*mass)
    Fb = F.ravel()
    y = np.linalg.solve(Z.T @ Mb @ Z, Z.T @ (Fb - Mb @ x0))
    return (x0 + Z @ y).reshape(k, n)
