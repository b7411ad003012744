"""Equilibrated flux reconstruction from vertex-patch mixed problems.

For every vertex ``a`` with hat function ``psi_a`` the local problem reads:
find ``q_a`` in RT_p of the patch and ``d_a`` in discontinuous P_p with

    (A^{-1} q_a, w) - (d_a, div w) = (psi_a grad u, w)
    -(div q_a, v)                 = (r_a, v)

where ``r_a = lam beta1 psi_a u - c psi_a u - (A grad psi_a) . grad u``.
Normal traces vanish on patch-boundary edges away from ``a`` and equal the
L2 projection of ``g_a = (lam beta2 - alpha) psi_a u`` on Neumann edges through
``a``. Patches without a Dirichlet edge carry one multiplier enforcing
``(d_a, 1) = 0``. The global flux is the sum of the patch fluxes.

Two routes solve the local systems. :func:`reconstruct_flux` assembles all
patches at once and factorizes them in batches of equal size;
:func:`solve_patch` treats one patch from its :class:`PatchData` and is used
for inspection and testing.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from functools import partial

import numpy as np
import scipy.linalg as sla

from .eigensolve import EigenPair
from .fem import FeSpace, ProblemCoefficients, _barycentric
from .mesh import (
    EDGE_NEUMANN,
    PATCH_DIRICHLET,
    Mesh,
    VertexPatch,
)
from .quadrature import line_rule, triangle_rule
from .raviart_thomas import (
    RaviartThomasSpace,
    legendre01,
    monomials,
    n_polynomials,
    rt_space,
)

COMPATIBILITY_RTOL = 1e-8
_CHUNK = 1024
_ELEMENT_BLOCK = 16384

_einsum = partial(np.einsum, optimize=True)


class FluxError(RuntimeError):
    """A patch problem could not be solved."""

    def __init__(self, message, vertex=None):
        super().__init__(message)
        self.vertex = vertex


# ---------------------------------------------------------------------- element kernels


@dataclass
class _ElementKernels:
    mass: np.ndarray  # (k, n, n)   (A^{-1} phi_i, phi_j)
    div: np.ndarray  # (k, np, n)  (div phi_i, v_a)
    mean: np.ndarray  # (k, np)     (1, v_a)
    load_flux: np.ndarray  # (k, 3, n)  (psi_l grad u, phi_i)
    load_div: np.ndarray  # (k, 3, np) (r_l, v_a)
    r_mean: np.ndarray  # (k, 3)
    r_norm2: np.ndarray  # (k, 3)
    term_norm2: np.ndarray  # (k, 3) squared norms of the separate terms of r_l


def _quadrature(degree):
    return triangle_rule(2 * degree + 2)


def _contract(a, b):
    """``sum_{q,x} a[k,q,i,x] b[k,q,j,x]`` as a batched matrix product."""
    k, q, i, x = a.shape
    return np.matmul(a.transpose(0, 2, 1, 3).reshape(k, i, q * x), b.transpose(0, 1, 3, 2).reshape(k, q * x, -1))


def _basis(rt, ref, elements):
    return rt.reference_basis(ref, elements)


def _blocks(n, size=_ELEMENT_BLOCK):
    """Index blocks bounding the memory of per-element quadrature arrays."""
    for start in range(0, n, size):
        yield np.arange(start, min(start + size, n))


def _matrices(rt: RaviartThomasSpace, A, elements):
    ref, w = _quadrature(rt.degree)
    x = rt.map_points(ref, elements)
    phi, dphi = _basis(rt, ref, elements)
    v = rt.polynomial_basis(elements, x)
    wd = w[None, :] * (2.0 * rt.mesh.areas[elements])[:, None]
    ainv = np.linalg.inv(A)
    aphi = np.matmul(phi, ainv[:, None]) * wd[:, :, None, None]
    mass = _contract(aphi, phi)
    div = np.matmul((v * wd[:, :, None]).swapaxes(1, 2), dphi)
    mean = _einsum("kq,kqa->ka", wd, v)
    return mass, div, mean


def _residual_density(space, coeffs, u, lam, ref, elements):
    """r_l at reference points for each local vertex l: (k, Q, 3), plus u and grad u."""
    mesh = space.mesh
    uq, gu = space.element_values(u, ref, elements)
    bary = _barycentric(ref)
    A = coeffs.element_diffusion(mesh)[elements]
    c = coeffs.element_reaction(mesh)[elements]
    b1 = coeffs.element_weight(mesh)[elements]
    gpsi = space.bary_gradients[elements]
    psi_u = uq[:, :, None] * bary[None, :, :]
    weight_term = (lam * b1)[:, None, None] * psi_u
    reaction_term = c[:, None, None] * psi_u
    flux_term = _einsum("klx,kxy,kqy->kql", gpsi, A, gu)
    r = weight_term - reaction_term - flux_term
    return r, uq, gu, bary, weight_term**2 + reaction_term**2 + flux_term**2


def _element_kernels(rt, space, coeffs, u, lam, elements) -> _ElementKernels:
    parts = [_element_kernels_block(rt, space, coeffs, u, lam, elements[b]) for b in _blocks(len(elements))]
    return _ElementKernels(*(np.concatenate([getattr(k, f.name) for k in parts]) for f in fields(_ElementKernels)))


def _element_kernels_block(rt, space, coeffs, u, lam, elements) -> _ElementKernels:
    mesh = space.mesh
    A = coeffs.element_diffusion(mesh)[elements]
    mass, div, mean = _matrices(rt, A, elements)
    ref, w = _quadrature(rt.degree)
    x = rt.map_points(ref, elements)
    phi, _ = _basis(rt, ref, elements)
    v = rt.polynomial_basis(elements, x)
    wd = w[None, :] * (2.0 * mesh.areas[elements])[:, None]
    r, _, gu, bary, terms2 = _residual_density(space, coeffs, u, lam, ref, elements)
    g = (wd[:, :, None] * gu)[:, :, None, :] * bary[None, :, :, None]
    load_flux = _contract(g, phi)
    load_div = np.matmul((r * wd[:, :, None]).swapaxes(1, 2), v)
    r_mean = _einsum("kq,kql->kl", wd, r)
    r_norm2 = _einsum("kq,kql->kl", wd, r**2)
    term_norm2 = _einsum("kq,kql->kl", wd, terms2)
    return _ElementKernels(mass, div, mean, load_flux, load_div, r_mean, r_norm2, term_norm2)


def _neumann_data(space, coeffs, u, lam, edges):
    """Moments of g_a on Neumann edges, for both endpoints.

    Returns
    -------
    moments : (j, 2, p+1) DOF values ``int g_a q.n_E L_k`` w.r.t. the global normal
    integral : (j, 2) ``int g_a``
    norm2 : (j, 2) ``||g_a||^2``
    """
    mesh = space.mesh
    p = space.degree
    t, w = line_rule(2 * p + 2)
    uq = space.edge_values(u, t, edges)
    factor = lam * coeffs.edge_weight(mesh)[edges] - coeffs.edge_robin(mesh)[edges]
    psi = np.stack([1.0 - t, t])  # endpoint 0, endpoint 1
    g = factor[:, None, None] * psi[None, :, :] * uq[:, None, :]
    ln = mesh.edge_lengths[edges]
    L = legendre01(p, t)
    sign = mesh.boundary_signs[edges]
    moments = (sign * ln)[:, None, None] * _einsum("q,jsq,qk->jsk", w, g, L)
    integral = ln[:, None] * _einsum("q,jsq->js", w, g)
    norm2 = ln[:, None] * _einsum("q,jsq->js", w, g**2)
    return moments, integral, norm2


# ---------------------------------------------------------------------- global field


@dataclass
class FluxField:
    """Global RT_p field: edge moments (global orientation) then interior moments.

    Attributes
    ----------
    space : RaviartThomasSpace
    coefficients : (E * (p+1) + M * n_interior,) DOF vector
    multipliers : per-vertex mean-value multipliers (NaN for Dirichlet patches)
    """

    space: RaviartThomasSpace
    coefficients: np.ndarray
    multipliers: np.ndarray = field(default=None, repr=False)

    @property
    def edge_dofs(self) -> np.ndarray:
        rt = self.space
        return self.coefficients[: rt.mesh.n_edges * rt.n_edge].reshape(-1, rt.n_edge)

    @property
    def interior_dofs(self) -> np.ndarray:
        rt = self.space
        return self.coefficients[rt.mesh.n_edges * rt.n_edge:].reshape(rt.mesh.n_triangles, -1)

    def element_dofs(self, elements=None) -> np.ndarray:
        rt = self.space
        if elements is None:
            elements = np.arange(rt.mesh.n_triangles)
        edge = self.edge_dofs[rt.mesh.tri_edges[elements]].reshape(len(elements), -1)
        return np.hstack([edge, self.interior_dofs[elements]])

    def evaluate(self, elements, x):
        """Values (k, Q, 2) and divergence (k, Q) at physical points (k, Q, 2)."""
        return self._combine(elements, *self.space.basis(elements, x))

    def evaluate_reference(self, ref):
        """Values and divergence on all triangles at reference points (Q, 2)."""
        parts = [self._combine(b, *self.space.reference_basis(ref, b)) for b in _blocks(self.space.mesh.n_triangles)]
        return np.concatenate([v for v, _ in parts]), np.concatenate([d for _, d in parts])

    def _combine(self, elements, phi, dphi):
        dofs = self.element_dofs(elements)
        vals = np.matmul(phi.swapaxes(-1, -2), dofs[:, None, :, None])[..., 0]
        return vals, np.matmul(dphi, dofs[:, :, None])[..., 0]

    @classmethod
    def from_element_dofs(cls, rt: RaviartThomasSpace, dofs, multipliers=None) -> "FluxField":
        mesh = rt.mesh
        k0 = mesh.edge_tris[:, 0]
        j0 = mesh.edge_local[:, 0]
        cols = j0[:, None] * rt.n_edge + np.arange(rt.n_edge)
        edge = dofs[k0[:, None], cols]
        interior = dofs[:, 3 * rt.n_edge:]
        return cls(rt, np.concatenate([edge.ravel(), interior.ravel()]), multipliers)


# ---------------------------------------------------------------------- batched reconstruction


@dataclass
class _Layout:
    """Local unknown numbering of every patch.

    Per vertex: spoke edge moments, then per (element, local vertex) pair the
    interior RT moments, then the d_a coefficients, then the multiplier.
    """

    size: np.ndarray  # (N,)
    rt_local: np.ndarray  # (M, 3, n), -1 for prescribed DOFs
    d_local: np.ndarray  # (M, 3, np)
    mult_local: np.ndarray  # (N,), -1 if none
    star_ptr: np.ndarray
    star_pairs: np.ndarray  # pair ids K*3+l grouped by vertex


def _layout(mesh: Mesh, p: int) -> _Layout:
    ne = p + 1
    n = (p + 1) * (p + 3)
    ni = n - 3 * ne
    npl = n_polynomials(p)
    nv = mesh.n_vertices
    tri = mesh.triangles
    flat = tri.ravel()
    order = np.argsort(flat, kind="stable")
    deg = np.bincount(flat, minlength=nv)
    ptr = np.concatenate([[0], np.cumsum(deg)])
    rpos = np.empty(flat.size, dtype=np.int64)
    rpos[order] = np.arange(flat.size) - ptr[flat[order]]
    rpos = rpos.reshape(-1, 3)

    # spokes: half edges (e, s) whose edge is not Neumann
    he_vertex = mesh.edges.ravel()
    he_free = np.repeat(mesh.edge_kind != EDGE_NEUMANN, 2)
    hid = np.flatnonzero(he_free)
    hv = he_vertex[hid]
    horder = np.argsort(hv, kind="stable")
    nsp = np.bincount(hv, minlength=nv)
    hptr = np.concatenate([[0], np.cumsum(nsp)])
    hpos = np.full(he_vertex.size, -1, dtype=np.int64)
    hpos[hid[horder]] = np.arange(hid.size) - hptr[hv[horder]]

    has_mult = mesh.vertex_classes != 2
    base_int = nsp * ne
    base_d = base_int + deg * ni
    mult = base_d + deg * npl
    size = mult + has_mult

    m = mesh.n_triangles
    rt_local = np.full((m, 3, n), -1, dtype=np.int64)
    ar = np.arange(m)
    for l in range(3):
        a = tri[:, l]
        for j in range(3):
            if j == l:
                continue
            e = mesh.tri_edges[:, j]
            s = (mesh.edges[e, 1] == a).astype(np.int64)
            pos = hpos[2 * e + s]
            ok = pos >= 0
            cols = j * ne + np.arange(ne)
            rt_local[ar[ok, None], l, cols[None, :]] = pos[ok, None] * ne + np.arange(ne)
        rt_local[:, l, 3 * ne:] = (base_int[a] + rpos[:, l] * ni)[:, None] + np.arange(ni)
    d_local = (base_d[tri] + rpos * npl)[:, :, None] + np.arange(npl)
    return _Layout(
        size=size,
        rt_local=rt_local,
        d_local=d_local,
        mult_local=np.where(has_mult, mult, -1),
        star_ptr=ptr,
        star_pairs=order,
    )


def _prescribed(mesh: Mesh, p: int, neumann_moments) -> np.ndarray:
    """(M, 3, n) prescribed normal-trace DOFs per (element, local vertex) pair."""
    ne = p + 1
    n = (p + 1) * (p + 3)
    fixed = np.zeros((mesh.n_triangles, 3, n))
    if neumann_moments is None:
        return fixed
    tri = mesh.triangles
    for l in range(3):
        a = tri[:, l]
        for j in range(3):
            if j == l:
                continue
            e = mesh.tri_edges[:, j]
            ks = np.flatnonzero(mesh.edge_kind[e] == EDGE_NEUMANN)
            if ks.size == 0:
                continue
            s = (mesh.edges[e[ks], 1] == a[ks]).astype(np.int64)
            fixed[ks, l, j * ne:(j + 1) * ne] = neumann_moments[e[ks], s]
    return fixed


def _check_compatibility(mesh, kern, neu_edges, g_int, g_norm2):
    nv = mesh.n_vertices
    tri = mesh.triangles.ravel()
    total = np.bincount(tri, weights=kern.r_mean.ravel(), minlength=nv)
    norm2 = np.bincount(tri, weights=kern.r_norm2.ravel(), minlength=nv)
    # r_a may cancel exactly (e.g. constant eigenfunctions); its terms set the floor
    floor = np.bincount(tri, weights=kern.term_norm2.ravel(), minlength=nv)
    gnorm2 = np.zeros(nv)
    if neu_edges.size:
        ends = mesh.edges[neu_edges].ravel()
        total += np.bincount(ends, weights=g_int.ravel(), minlength=nv)
        gnorm2 = np.bincount(ends, weights=g_norm2.ravel(), minlength=nv)
    scale = np.sqrt(norm2) + np.sqrt(gnorm2) + np.sqrt(floor) + np.finfo(float).tiny
    rel = np.abs(total) / scale
    rel[mesh.vertex_classes == 2] = 0.0
    return rel


def reconstruct_flux(
    space: FeSpace,
    coeffs: ProblemCoefficients,
    pair: EigenPair,
    compatibility_rtol: float = COMPATIBILITY_RTOL,
) -> FluxField:
    """Solve all vertex-patch problems and sum their fluxes.

    Raises
    ------
    FluxError
        if a non-Dirichlet patch violates the compatibility condition beyond
        ``compatibility_rtol`` or a local system is singular.
    """
    mesh = space.mesh
    p = space.degree
    rt = rt_space(mesh, p)
    u = space.expand(pair.vector)
    lam = float(pair.value)
    elements = np.arange(mesh.n_triangles)
    kern = _element_kernels(rt, space, coeffs, u, lam, elements)

    neu = mesh.boundary_edges(EDGE_NEUMANN)
    moments = None
    g_int = g_norm2 = np.zeros((0, 2))
    if neu.size:
        mom, g_int, g_norm2 = _neumann_data(space, coeffs, u, lam, neu)
        moments = np.zeros((mesh.n_edges, 2, p + 1))
        moments[neu] = mom

    rel = _check_compatibility(mesh, kern, neu, g_int, g_norm2)
    bad = int(np.argmax(rel))
    if rel[bad] > compatibility_rtol:
        raise FluxError(
            f"patch of vertex {bad} violates compatibility (relative defect {rel[bad]:.3e}); "
            "the eigenpair is not accurate enough",
            vertex=bad,
        )

    lay = _layout(mesh, p)
    fixed = _prescribed(mesh, p, moments)
    pair_dofs = np.zeros_like(fixed)
    multipliers = np.full(mesh.n_vertices, np.nan)

    order = np.argsort(lay.size, kind="stable")
    sizes = lay.size[order]
    bounds = np.flatnonzero(np.diff(sizes)) + 1
    for group in np.split(order, bounds):
        for start in range(0, group.size, _CHUNK):
            verts = group[start:start + _CHUNK]
            _solve_chunk(mesh, lay, kern, fixed, verts, pair_dofs, multipliers)

    dofs = pair_dofs.sum(axis=1)
    return FluxField.from_element_dofs(rt, dofs, multipliers)


def _solve_chunk(mesh, lay, kern, fixed, verts, pair_dofs, multipliers):
    N = int(lay.size[verts[0]])
    P = verts.size
    slot = np.full(mesh.n_vertices, -1, dtype=np.int64)
    slot[verts] = np.arange(P)
    starts = lay.star_ptr[verts]
    lens = lay.star_ptr[verts + 1] - starts
    offs = np.repeat(starts - np.concatenate([[0], np.cumsum(lens)[:-1]]), lens)
    pid = lay.star_pairs[offs + np.arange(lens.sum())]
    K, l = pid // 3, pid % 3
    s = slot[mesh.triangles[K, l]]

    L = lay.rt_local[K, l]
    D = lay.d_local[K, l]
    fx = fixed[K, l]
    Mk = kern.mass[K]
    Bk = kern.div[K]
    free = L >= 0
    NN = N * N

    rows, vals = [], []

    def add(r, c, v, mask):
        base = np.broadcast_to(s.reshape((-1,) + (1,) * (r.ndim - 1)), mask.shape)
        rows.append((base * NN + r * N + c)[mask])
        vals.append(v[mask])

    mm = free[:, :, None] & free[:, None, :]
    add(np.broadcast_to(L[:, :, None], mm.shape), np.broadcast_to(L[:, None, :], mm.shape), Mk, mm)
    bm = np.broadcast_to(free[:, None, :], Bk.shape)
    Dr = np.broadcast_to(D[:, :, None], Bk.shape)
    Lc = np.broadcast_to(L[:, None, :], Bk.shape)
    add(Dr, Lc, -Bk, bm)
    add(Lc, Dr, -Bk, bm)
    mult = lay.mult_local[mesh.triangles[K, l]]
    cm = np.broadcast_to((mult >= 0)[:, None], D.shape)
    mcol = np.broadcast_to(mult[:, None], D.shape)
    add(mcol, D, kern.mean[K], cm)
    add(D, mcol, kern.mean[K], cm)
    S = np.bincount(np.concatenate(rows), weights=np.concatenate(vals), minlength=P * NN).reshape(P, N, N)

    rq = kern.load_flux[K, l] - _einsum("kij,kj->ki", Mk, fx)
    rd = kern.load_div[K, l] + _einsum("kai,ki->ka", Bk, fx)
    ridx = np.concatenate([(s[:, None] * N + L)[free], (s[:, None] * N + D).ravel()])
    rval = np.concatenate([rq[free], rd.ravel()])
    rhs = np.bincount(ridx, weights=rval, minlength=P * N).reshape(P, N)

    try:
        X = np.linalg.solve(S, rhs[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        for i in range(P):
            try:
                sla.lu_factor(S[i], check_finite=True)
                np.linalg.solve(S[i], rhs[i])
            except (np.linalg.LinAlgError, sla.LinAlgError, ValueError):
                raise FluxError(f"singular local system on the patch of vertex {verts[i]}", vertex=int(verts[i])) from None
        raise FluxError("singular local system in a patch batch") from None
    pair_dofs[K, l] = np.where(free, X[s[:, None], np.where(free, L, 0)], fx)
    has = lay.mult_local[verts] >= 0
    multipliers[verts[has]] = X[np.flatnonzero(has), lay.mult_local[verts[has]]]


# ---------------------------------------------------------------------- single patch route


@dataclass
class RtPatchSpace:
    """Local RT_p layout of one vertex patch.

    Attributes
    ----------
    patch : VertexPatch
    degree : int
    edge_dofs : dict edge -> (p+1,) local unknown indices of free normal-trace moments
    interior_dofs : dict element -> local unknown indices of interior moments
    constrained_edges : dict edge -> "zero" (outer edges) or "neumann" (Neumann spokes)
    """

    patch: VertexPatch
    degree: int
    edge_dofs: dict
    interior_dofs: dict
    constrained_edges: dict
    rt: RaviartThomasSpace = field(repr=False)

    @property
    def n_flux(self) -> int:
        return len(self.edge_dofs) * (self.degree + 1) + sum(len(v) for v in self.interior_dofs.values())

    @property
    def has_multiplier(self) -> bool:
        return self.patch.patch_class != PATCH_DIRICHLET


def rt_patch_space(mesh: Mesh, patch: VertexPatch, degree: int) -> RtPatchSpace:
    rt = rt_space(mesh, degree)
    ne = degree + 1
    edge_dofs, interior, constrained = {}, {}, {}
    nxt = 0
    for e in np.concatenate([patch.interior_edges, patch.dirichlet_spoke_edges]):
        edge_dofs[int(e)] = np.arange(nxt, nxt + ne)
        nxt += ne
    for e in patch.neumann_spoke_edges:
        constrained[int(e)] = "neumann"
    for e in patch.outer_edges:
        constrained[int(e)] = "zero"
    for K in patch.elements:
        interior[int(K)] = np.arange(nxt, nxt + rt.n_interior)
        nxt += rt.n_interior
    return RtPatchSpace(patch, degree, edge_dofs, interior, constrained, rt)


@dataclass
class PatchData:
    """Polynomial data of one patch problem.

    All element polynomials use the scaled monomial basis of the element
    (see :mod:`eigbounds.raviart_thomas`); edge polynomials use Legendre
    polynomials on the globally oriented edge.

    Attributes
    ----------
    elements : patch triangles
    local_vertex : position of the patch vertex in each triangle
    residual_density : (k, n_{p+1}) coefficients of r_a
    weighted_gradient : (k, n_p, 2) coefficients of psi_a grad u
    neumann_edges : Neumann spoke edges
    neumann_density : (j, p+2) Legendre coefficients of g_a
    """

    elements: np.ndarray
    local_vertex: np.ndarray
    residual_density: np.ndarray
    weighted_gradient: np.ndarray
    neumann_edges: np.ndarray
    neumann_density: np.ndarray
    diffusion: np.ndarray = field(repr=False)

    def residual_at(self, rt: RaviartThomasSpace, x) -> np.ndarray:
        vals, _ = monomials(rt.degree + 1, rt.to_local(self.elements, x))
        return _einsum("kqa,ka->kq", vals, self.residual_density)

    def neumann_at(self, t) -> np.ndarray:
        p1 = self.neumann_density.shape[1] - 1
        return self.neumann_density @ legendre01(p1, t).T


def _fit_monomials(rt, elements, degree, samples, ref, w):
    """Least-squares fit (exact for polynomial samples) onto scaled monomials."""
    x = rt.map_points(ref, elements)
    V, _ = monomials(degree, rt.to_local(elements, x))
    G = _einsum("q,kqa,kqb->kab", w, V, V)
    rhs = _einsum("q,kqa,kq->ka", w, V, samples)
    return np.linalg.solve(G, rhs[..., None])[..., 0]


def patch_data(space: FeSpace, coeffs: ProblemCoefficients, pair: EigenPair, patch: VertexPatch) -> PatchData:
    """Polynomial representations of r_a, psi_a grad u and g_a on one patch."""
    mesh = space.mesh
    p = space.degree
    rt = rt_space(mesh, p)
    a = patch.center_vertex
    els = np.asarray(patch.elements)
    lv = np.argmax(mesh.triangles[els] == a, axis=1)
    u = space.expand(pair.vector)
    lam = float(pair.value)
    ref, w = triangle_rule(2 * p + 4)
    r, _, gu, bary, _ = _residual_density(space, coeffs, u, lam, ref, els)
    r_a = r[np.arange(els.size), :, lv]
    wg = bary[:, lv].T[:, :, None] * gu
    res = _fit_monomials(rt, els, p + 1, r_a, ref, w)
    grad = np.stack([_fit_monomials(rt, els, p, wg[..., c], ref, w) for c in range(2)], axis=-1)

    neu = np.asarray(patch.neumann_spoke_edges, dtype=np.int64)
    dens = np.zeros((neu.size, p + 2))
    if neu.size:
        t, wt = line_rule(2 * p + 4)
        uq = space.edge_values(u, t, neu)
        factor = lam * coeffs.edge_weight(mesh)[neu] - coeffs.edge_robin(mesh)[neu]
        psi = np.where((mesh.edges[neu, 0] == a)[:, None], 1.0 - t[None, :], t[None, :])
        g = factor[:, None] * psi * uq
        L = legendre01(p + 1, t)
        dens = _einsum("q,jq,qk->jk", wt, g, L) * (2 * np.arange(p + 2) + 1)
    return PatchData(
        elements=els,
        local_vertex=lv,
        residual_density=res,
        weighted_gradient=grad,
        neumann_edges=neu,
        neumann_density=dens,
        diffusion=coeffs.element_diffusion(mesh)[els],
    )


@dataclass
class LocalFlux:
    """Solution of one patch problem.

    Attributes
    ----------
    elements : patch triangles
    element_dofs : (k, n) RT DOFs of q_a on each patch triangle
    pressure : (k, n_p) coefficients of d_a in the scaled monomial basis
    multiplier : mean-value multiplier (0.0 for Dirichlet patches)
    """

    elements: np.ndarray
    element_dofs: np.ndarray
    pressure: np.ndarray
    multiplier: float


def patch_system(space: RtPatchSpace, data: PatchData, pair: EigenPair | None = None):
    """Dense saddle-point matrix and right-hand side of one patch problem.

    Returns
    -------
    S : (N, N) array
    rhs : (N,) array
    element_map : (k, n) local unknown index per element DOF, -1 where prescribed
    prescribed : (k, n) prescribed values (zero or Neumann moments)
    """
    rt = space.rt
    mesh = rt.mesh
    p = space.degree
    ne = p + 1
    npl = n_polynomials(p)
    els = data.elements
    k = els.size
    n_flux = space.n_flux
    N = n_flux + k * npl + int(space.has_multiplier)
    mass, div, mean = _matrices(rt, data.diffusion, els)

    ref, w = _quadrature(p)
    x = rt.map_points(ref, els)
    phi, _ = rt.basis(els, x)
    v = rt.polynomial_basis(els, x)
    wd = w[None, :] * (2.0 * mesh.areas[els])[:, None]
    wg = _einsum("kqa,kax->kqx", rt.polynomial_basis(els, x), data.weighted_gradient)
    load_flux = _einsum("kq,kqx,kqix->ki", wd, wg, phi)
    load_div = _einsum("kq,kq,kqa->ka", wd, data.residual_at(rt, x), v)

    neu_mom = {}
    if data.neumann_edges.size:
        t, wt = line_rule(2 * p + 4)
        g = data.neumann_at(t)
        L = legendre01(p, t)
        ln = mesh.edge_lengths[data.neumann_edges]
        sg = mesh.boundary_signs[data.neumann_edges]
        mom = (sg * ln)[:, None] * _einsum("q,jq,qk->jk", wt, g, L)
        neu_mom = {int(e): mom[i] for i, e in enumerate(data.neumann_edges)}

    n = rt.n_local
    emap = np.full((k, n), -1, dtype=np.int64)
    pres = np.zeros((k, n))
    for i, K in enumerate(els):
        for j in range(3):
            e = int(mesh.tri_edges[K, j])
            cols = slice(j * ne, (j + 1) * ne)
            if e in space.edge_dofs:
                emap[i, cols] = space.edge_dofs[e]
            elif e in neu_mom:
                pres[i, cols] = neu_mom[e]
        emap[i, 3 * ne:] = space.interior_dofs[int(K)]

    S = np.zeros((N, N))
    rhs = np.zeros(N)
    for i in range(k):
        f = np.flatnonzero(emap[i] >= 0)
        gi = emap[i, f]
        d = n_flux + i * npl + np.arange(npl)
        S[np.ix_(gi, gi)] += mass[i][np.ix_(f, f)]
        S[np.ix_(d, gi)] -= div[i][:, f]
        S[np.ix_(gi, d)] -= div[i][:, f].T
        rhs[gi] += load_flux[i][f] - mass[i][f] @ pres[i]
        rhs[d] += load_div[i] + div[i] @ pres[i]
        if space.has_multiplier:
            S[N - 1, d] = mean[i]
            S[d, N - 1] = mean[i]
    return S, rhs, emap, pres


def solve_patch(space: RtPatchSpace, data: PatchData, pair: EigenPair | None = None) -> LocalFlux:
    """Solve the mixed problem of one patch by dense LU with partial pivoting."""
    S, rhs, emap, pres = patch_system(space, data, pair)
    lu, piv = sla.lu_factor(S)
    if np.any(np.abs(np.diag(lu)) <= np.finfo(float).eps * np.abs(S).max() * S.shape[0]):
        raise FluxError(
            f"singular local system on the patch of vertex {space.patch.center_vertex}",
            vertex=space.patch.center_vertex,
        )
    X = sla.lu_solve((lu, piv), rhs)
    dofs = np.where(emap >= 0, X[np.where(emap >= 0, emap, 0)], pres)
    npl = n_polynomials(space.degree)
    k = data.elements.size
    d = X[space.n_flux:space.n_flux + k * npl].reshape(k, npl)
    mult = float(X[-1]) if space.has_multiplier else 0.0
    return LocalFlux(data.elements, dofs, d, mult)


# ---------------------------------------------------------------------- diagnostics


@dataclass
class EquilibrationReport:
    """Residuals of the two equilibration identities.

    ``element_residual[K] = ||lam beta1 u - c u + div q||_K``. Its scale is
    ``||lam beta1 u||_K + ||c u||_K + ||div q||_K + ||q||_K / h_K`` plus the
    share ``sqrt(|K| / |Omega|)`` of the same quantities over the domain, so
    that elements on nodal lines (where every local term is roundoff) are not
    compared against roundoff. Edge arrays hold
    ``||alpha u - lam beta2 u + q.n||_E`` on Neumann edges with the analogous
    scale built from ``alpha u``, ``lam beta2 u`` and ``q``.
    """

    element_residual: np.ndarray
    element_scale: np.ndarray
    neumann_edges: np.ndarray
    edge_residual: np.ndarray
    edge_scale: np.ndarray

    @staticmethod
    def _relative(res, scale):
        if res.size == 0:
            return 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(scale > 0, res / scale, np.where(res > 0, np.inf, 0.0))
        return float(rel.max())

    @property
    def max_element_relative(self) -> float:
        return self._relative(self.element_residual, self.element_scale)

    @property
    def max_edge_relative(self) -> float:
        return self._relative(self.edge_residual, self.edge_scale)

    @property
    def max_relative(self) -> float:
        return max(self.max_element_relative, self.max_edge_relative)


def equilibration_residuals(space: FeSpace, coeffs: ProblemCoefficients, pair: EigenPair, flux: FluxField) -> EquilibrationReport:
    mesh = space.mesh
    p = space.degree
    lam = float(pair.value)
    u = space.expand(pair.vector)
    els = np.arange(mesh.n_triangles)
    ref, w = triangle_rule(2 * p + 2)
    wd = w[None, :] * (2.0 * mesh.areas)[:, None]
    uq, _ = space.element_values(u, ref, els)
    b1 = coeffs.element_weight(mesh)[:, None]
    c = coeffs.element_reaction(mesh)[:, None]

    def norm(f):
        return np.sqrt(_einsum("kq,kq->k", wd, f**2))

    qv, divq = flux.evaluate_reference(ref)
    el_res = norm(lam * b1 * uq - c * uq + divq)
    local = norm(lam * b1 * uq) + norm(c * uq) + norm(divq) + norm(np.linalg.norm(qv, axis=-1)) / mesh.diameters
    share = np.sqrt(mesh.areas / mesh.total_area)
    el_scale = local + share * np.sqrt(np.sum(local**2))

    neu = mesh.boundary_edges(EDGE_NEUMANN)
    ed_res = ed_scale = np.zeros(0)
    if neu.size:
        t, wt = line_rule(2 * p + 2)
        ue = space.edge_values(u, t, neu)
        K0 = mesh.edge_tris[neu, 0]
        v0 = mesh.vertices[mesh.edges[neu, 0]]
        v1 = mesh.vertices[mesh.edges[neu, 1]]
        x = v0[:, None, :] + t[None, :, None] * (v1 - v0)[:, None, :]
        qe, _ = flux.evaluate(K0, x)
        qn = _einsum("jqx,jx->jq", qe, mesh.edge_normals[neu]) * mesh.boundary_signs[neu][:, None]
        alpha = coeffs.edge_robin(mesh)[neu][:, None]
        b2 = coeffs.edge_weight(mesh)[neu][:, None]
        ln = mesh.edge_lengths[neu][:, None]

        def enorm(f):
            return np.sqrt(np.sum(ln * wt[None, :] * f**2, axis=1))

        ed_res = enorm(alpha * ue - lam * b2 * ue + qn)
        local = enorm(alpha * ue) + enorm(lam * b2 * ue) + enorm(np.linalg.norm(qe, axis=-1))
        share = np.sqrt(ln[:, 0] / ln.sum())
        ed_scale = local + share * np.sqrt(np.sum(local**2))
    return EquilibrationReport(el_res, el_scale, neu, ed_res, ed_scale)
