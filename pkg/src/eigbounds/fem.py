"""Conforming Lagrange finite elements of degree 1 and 2 on triangle meshes."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .mesh import EDGE_DIRICHLET, EDGE_NEUMANN, Mesh
from .quadrature import line_rule, triangle_rule

SUPPORTED_DEGREES = (1, 2)
ANY = "*"


class CoefficientError(ValueError):
    """Raised for missing or inadmissible problem coefficients."""


def _as_table(value, name, matrix=False):
    if isinstance(value, dict):
        table = {}
        for k, v in value.items():
            key = ANY if k in (ANY, "default") else int(k)
            table[key] = _as_matrix(v) if matrix else float(v)
        return table
    return {ANY: _as_matrix(value) if matrix else float(value)}


def _as_matrix(v):
    a = np.asarray(v, dtype=float)
    if a.ndim == 0:
        return float(a) * np.eye(2)
    if a.shape != (2, 2):
        raise CoefficientError(f"diffusion must be a scalar or a 2x2 matrix, got shape {a.shape}")
    return a


def _lookup(table, keys, name):
    keys = np.asarray(keys)
    out = []
    for k in np.unique(keys):
        if int(k) in table:
            out.append((k, table[int(k)]))
        elif ANY in table:
            out.append((k, table[ANY]))
        else:
            raise CoefficientError(f"no value of {name} for label {int(k)}")
    return dict(out)


@dataclass
class ProblemCoefficients:
    """Piecewise constant data of the eigenproblem.

    ``diffusion``, ``reaction`` and ``weight_domain`` are keyed by triangle
    region labels; ``robin`` and ``weight_boundary`` by boundary markers.
    The key ``"*"`` supplies a value for every label.
    """

    diffusion: dict
    reaction: dict
    robin: dict
    weight_domain: dict
    weight_boundary: dict
    ellipticity_threshold: float = 1e-12

    def __post_init__(self):
        for key, a in self.diffusion.items():
            if not np.allclose(a, a.T, rtol=0, atol=1e-14 * np.abs(a).max()):
                raise CoefficientError(f"diffusion for label {key} is not symmetric")
            if np.linalg.eigvalsh(a).min() < self.ellipticity_threshold:
                raise CoefficientError(f"diffusion for label {key} is not uniformly positive definite")
        for name in ("reaction", "robin", "weight_domain", "weight_boundary"):
            for key, v in getattr(self, name).items():
                if v < 0:
                    raise CoefficientError(f"{name} for label {key} must be nonnegative")

    @classmethod
    def from_dict(cls, block: dict) -> "ProblemCoefficients":
        """Build from the run-config block with keys ``A, c, alpha, beta1, beta2``."""
        known = {"A", "c", "alpha", "beta1", "beta2"}
        extra = set(block) - known
        if extra:
            raise CoefficientError(f"unknown coefficient keys: {sorted(extra)}")
        return cls(
            diffusion=_as_table(block.get("A", 1.0), "A", matrix=True),
            reaction=_as_table(block.get("c", 0.0), "c"),
            robin=_as_table(block.get("alpha", 0.0), "alpha"),
            weight_domain=_as_table(block.get("beta1", 1.0), "beta1"),
            weight_boundary=_as_table(block.get("beta2", 0.0), "beta2"),
        )

    @classmethod
    def laplace(cls, c=0.0, alpha=0.0, beta1=1.0, beta2=0.0) -> "ProblemCoefficients":
        return cls.from_dict({"A": 1.0, "c": c, "alpha": alpha, "beta1": beta1, "beta2": beta2})

    def element_diffusion(self, mesh: Mesh) -> np.ndarray:
        table = _lookup(self.diffusion, mesh.regions, "A")
        out = np.empty((mesh.n_triangles, 2, 2))
        for k, a in table.items():
            out[mesh.regions == k] = a
        return out

    def _element_scalar(self, mesh, name):
        table = _lookup(getattr(self, name), mesh.regions, name)
        out = np.empty(mesh.n_triangles)
        for k, v in table.items():
            out[mesh.regions == k] = v
        return out

    def element_reaction(self, mesh: Mesh) -> np.ndarray:
        return self._element_scalar(mesh, "reaction")

    def element_weight(self, mesh: Mesh) -> np.ndarray:
        return self._element_scalar(mesh, "weight_domain")

    def _edge_scalar(self, mesh, name):
        out = np.zeros(mesh.n_edges)
        neu = mesh.edge_kind == EDGE_NEUMANN
        if neu.any():
            table = _lookup(getattr(self, name), mesh.edge_marker[neu], name)
            for k, v in table.items():
                out[neu & (mesh.edge_marker == k)] = v
        return out

    def edge_robin(self, mesh: Mesh) -> np.ndarray:
        """alpha per edge, zero off the Neumann boundary."""
        return self._edge_scalar(mesh, "robin")

    def edge_weight(self, mesh: Mesh) -> np.ndarray:
        """beta2 per edge, zero off the Neumann boundary."""
        return self._edge_scalar(mesh, "weight_boundary")


# ---------------------------------------------------------------------- reference basis


def _barycentric(ref):
    ref = np.asarray(ref, dtype=float)
    xi, eta = ref[..., 0], ref[..., 1]
    return np.stack([1.0 - xi - eta, xi, eta], axis=-1)


_BARY_GRAD = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


def reference_basis(degree: int, ref) -> tuple[np.ndarray, np.ndarray]:
    """Lagrange basis on the reference triangle.

    Local numbering: vertices 0, 1, 2, then (for degree 2) the midpoints of
    local edges 0, 1, 2 (edge ``j`` is opposite vertex ``j``).

    Returns values ``(..., n)`` and reference gradients ``(..., n, 2)``.
    """
    lam = _barycentric(ref)
    if degree == 1:
        vals = lam
        grads = np.broadcast_to(_BARY_GRAD, lam.shape + (2,)).copy()
        return vals, grads
    if degree == 2:
        g = _BARY_GRAD
        vals, grads = [], []
        for j in range(3):
            vals.append(lam[..., j] * (2.0 * lam[..., j] - 1.0))
            grads.append((4.0 * lam[..., j] - 1.0)[..., None] * g[j])
        for j in range(3):
            a, b = (j + 1) % 3, (j + 2) % 3
            vals.append(4.0 * lam[..., a] * lam[..., b])
            grads.append(4.0 * (lam[..., b][..., None] * g[a] + lam[..., a][..., None] * g[b]))
        return np.stack(vals, axis=-1), np.stack(grads, axis=-2)
    raise ValueError(f"unsupported degree {degree}")


def reference_hessians(degree: int) -> np.ndarray:
    """Constant reference Hessians ``(n, 2, 2)`` of the Lagrange basis."""
    if degree == 1:
        return np.zeros((3, 2, 2))
    g = _BARY_GRAD
    out = [4.0 * np.outer(g[j], g[j]) for j in range(3)]
    for j in range(3):
        a, b = (j + 1) % 3, (j + 2) % 3
        out.append(4.0 * (np.outer(g[a], g[b]) + np.outer(g[b], g[a])))
    return np.array(out)


def reference_nodes(degree: int) -> np.ndarray:
    v = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    if degree == 1:
        return v
    mids = np.array([0.5 * (v[(j + 1) % 3] + v[(j + 2) % 3]) for j in range(3)])
    return np.vstack([v, mids])


def edge_basis(degree: int, t) -> np.ndarray:
    """Traces on an edge parametrised by ``t`` in [0, 1] from its first to its
    second vertex. Columns: first vertex, second vertex, (midpoint)."""
    t = np.asarray(t, dtype=float)
    if degree == 1:
        return np.stack([1.0 - t, t], axis=-1)
    return np.stack([(1.0 - t) * (1.0 - 2.0 * t), t * (2.0 * t - 1.0), 4.0 * t * (1.0 - t)], axis=-1)


# ---------------------------------------------------------------------- space


class FeSpace:
    """Continuous piecewise polynomials of degree ``degree`` vanishing on the Dirichlet part.

    Attributes
    ----------
    dof_map : (M, n_local) array of global DOF indices
    dirichlet_dofs : sorted array of constrained DOFs (nodes on the closed Dirichlet boundary)
    free_dofs : sorted array of the remaining DOFs
    """

    def __init__(self, mesh: Mesh, degree: int = 1):
        if degree not in SUPPORTED_DEGREES:
            raise ValueError(f"degree must be one of {SUPPORTED_DEGREES}, got {degree}")
        self.mesh = mesh
        self.degree = degree
        nv = mesh.n_vertices
        if degree == 1:
            self.dof_map = mesh.triangles.copy()
            self.n_dofs = nv
        else:
            self.dof_map = np.hstack([mesh.triangles, nv + mesh.tri_edges])
            self.n_dofs = nv + mesh.n_edges
        dir_edges = np.flatnonzero(mesh.edge_kind == EDGE_DIRICHLET)
        dofs = [mesh.edges[dir_edges].ravel()]
        if degree == 2:
            dofs.append(nv + dir_edges)
        self.dirichlet_dofs = np.unique(np.concatenate(dofs)).astype(np.int64)
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.dirichlet_dofs] = False
        self.free_dofs = np.flatnonzero(mask)

    @property
    def n_local(self) -> int:
        return self.dof_map.shape[1]

    @property
    def n_free(self) -> int:
        return len(self.free_dofs)

    @cached_property
    def jacobians(self) -> np.ndarray:
        p = self.mesh.vertices[self.mesh.triangles]
        return np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)

    @cached_property
    def inverse_jacobians(self) -> np.ndarray:
        return np.linalg.inv(self.jacobians)

    @cached_property
    def bary_gradients(self) -> np.ndarray:
        """(M, 3, 2) physical gradients of the barycentric coordinates (hat functions)."""
        return np.einsum("jr,krx->kjx", _BARY_GRAD, self.inverse_jacobians)

    @cached_property
    def dof_coordinates(self) -> np.ndarray:
        coords = np.empty((self.n_dofs, 2))
        ref = reference_nodes(self.degree)
        x = self.map_points(np.arange(self.mesh.n_triangles), ref)
        coords[self.dof_map.ravel()] = x.reshape(-1, 2)
        return coords

    def map_points(self, elements, ref) -> np.ndarray:
        """Reference points ``(Q, 2)`` to physical points ``(len(elements), Q, 2)``."""
        v0 = self.mesh.vertices[self.mesh.triangles[elements, 0]]
        return v0[:, None, :] + np.einsum("kxr,qr->kqx", self.jacobians[elements], np.asarray(ref, float))

    def to_reference(self, elements, points) -> np.ndarray:
        """Physical points ``(k, Q, 2)`` to reference coordinates of ``elements``."""
        v0 = self.mesh.vertices[self.mesh.triangles[elements, 0]]
        return np.einsum("krx,kqx->kqr", self.inverse_jacobians[elements], points - v0[:, None, :])

    def expand(self, vec) -> np.ndarray:
        """Free-DOF vector to a full DOF vector with zero Dirichlet values."""
        vec = np.asarray(vec)
        if vec.shape[0] == self.n_dofs:
            return vec
        if vec.shape[0] != self.n_free:
            raise ValueError("vector length matches neither the free nor the full DOF count")
        full = np.zeros((self.n_dofs,) + vec.shape[1:], dtype=vec.dtype)
        full[self.free_dofs] = vec
        return full

    def element_values(self, vec, ref, elements=None):
        """Values ``(k, Q)`` and physical gradients ``(k, Q, 2)`` at reference points."""
        full = self.expand(vec)
        if elements is None:
            elements = np.arange(self.mesh.n_triangles)
        phi, dphi = reference_basis(self.degree, ref)
        coef = full[self.dof_map[elements]]
        vals = coef @ phi.T
        gref = np.einsum("ki,qir->kqr", coef, dphi, optimize=True)
        grads = np.matmul(gref, self.inverse_jacobians[elements])
        return vals, grads

    def element_hessians(self, vec) -> np.ndarray:
        """(M, 2, 2) constant physical Hessians (zero for degree 1)."""
        full = self.expand(vec)
        coef = full[self.dof_map]
        href = np.einsum("ki,irs->krs", coef, reference_hessians(self.degree))
        inv = self.inverse_jacobians
        return np.einsum("krx,krs,ksy->kxy", inv, href, inv)

    def edge_values(self, vec, t, edges=None) -> np.ndarray:
        """Traces ``(k, Q)`` on edges at parameters ``t`` along the global orientation."""
        full = self.expand(vec)
        mesh = self.mesh
        if edges is None:
            edges = np.arange(mesh.n_edges)
        cols = [mesh.edges[edges, 0], mesh.edges[edges, 1]]
        if self.degree == 2:
            cols.append(mesh.n_vertices + edges)
        coef = full[np.column_stack(cols)]
        return coef @ edge_basis(self.degree, t).T


@dataclass
class AssembledForms:
    """Matrices of the forms a and b restricted to the free DOFs."""

    stiffness: sp.csr_matrix
    mass: sp.csr_matrix
    space: FeSpace | None = None


def _coo(space, local):
    dm = space.dof_map
    n = space.n_local
    rows = np.repeat(dm, n, axis=1).ravel()
    cols = np.tile(dm, (1, n)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(space.n_dofs, space.n_dofs))


def _edge_coo(space, edges, weights):
    mesh = space.mesh
    t, w = line_rule(2 * space.degree + 2)
    phi = edge_basis(space.degree, t)
    base = np.einsum("q,qi,qj->ij", w, phi, phi)
    base = 0.5 * (base + base.T)
    local = (weights * mesh.edge_lengths[edges])[:, None, None] * base
    cols = [mesh.edges[edges, 0], mesh.edges[edges, 1]]
    if space.degree == 2:
        cols.append(mesh.n_vertices + edges)
    dm = np.column_stack(cols)
    n = dm.shape[1]
    rows = np.repeat(dm, n, axis=1).ravel()
    cc = np.tile(dm, (1, n)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cc)), shape=(space.n_dofs, space.n_dofs))


def assemble_full(space: FeSpace, coeffs: ProblemCoefficients):
    """Full (unconstrained) matrices of a and b on all DOFs."""
    mesh = space.mesh
    ref, w = triangle_rule(2 * space.degree + 2)
    phi, dphi = reference_basis(space.degree, ref)
    det = 2.0 * mesh.areas
    grads = np.einsum("qir,krx->kqix", dphi, space.inverse_jacobians)
    A = coeffs.element_diffusion(mesh)
    c = coeffs.element_reaction(mesh)
    beta1 = coeffs.element_weight(mesh)
    wk = det[:, None] * w[None, :]
    agrads = np.matmul(grads, A[:, None]) * wk[:, :, None, None]
    k, q, n, _ = grads.shape
    stiff = np.matmul(agrads.transpose(0, 2, 1, 3).reshape(k, n, 2 * q), grads.transpose(0, 1, 3, 2).reshape(k, 2 * q, n))
    mass_ref = np.einsum("q,qi,qj->ij", w, phi, phi)
    mass_ref = 0.5 * (mass_ref + mass_ref.T)
    mass_loc = det[:, None, None] * mass_ref
    stiff = stiff + c[:, None, None] * mass_loc
    # exact symmetry of the local kernels
    stiff = 0.5 * (stiff + stiff.transpose(0, 2, 1))
    Kf = _coo(space, stiff)
    Mf = _coo(space, beta1[:, None, None] * mass_loc)

    neu = np.flatnonzero(mesh.edge_kind == EDGE_NEUMANN)
    if neu.size:
        alpha = coeffs.edge_robin(mesh)[neu]
        beta2 = coeffs.edge_weight(mesh)[neu]
        Kf = Kf + _edge_coo(space, neu, alpha)
        Mf = Mf + _edge_coo(space, neu, beta2)
    Kf = sp.csr_matrix(Kf)
    Mf = sp.csr_matrix(Mf)
    Kf.sum_duplicates()
    Mf.sum_duplicates()
    return Kf, Mf


def check_definiteness(space: FeSpace, coeffs: ProblemCoefficients) -> None:
    """Require one of: Dirichlet part, positive reaction, positive Robin term."""
    mesh = space.mesh
    if np.any(mesh.edge_kind == EDGE_DIRICHLET):
        return
    if np.any(coeffs.element_reaction(mesh) > 0):
        return
    if np.any(coeffs.edge_robin(mesh) > 0):
        return
    raise CoefficientError(
        "form a is not a scalar product: no Dirichlet boundary, no positive reaction and no positive Robin term"
    )


def assemble_forms(space: FeSpace, coeffs: ProblemCoefficients) -> AssembledForms:
    """Assemble a(u,v) = (A grad u, grad v) + (c u, v) + (alpha u, v)_N and
    b(u,v) = (beta1 u, v) + (beta2 u, v)_N on the free DOFs.

    Dirichlet DOFs are removed by deleting their rows and columns.
    """
    check_definiteness(space, coeffs)
    Kf, Mf = assemble_full(space, coeffs)
    free = space.free_dofs
    K = Kf[free][:, free].tocsr()
    M = Mf[free][:, free].tocsr()
    return AssembledForms(stiffness=K, mass=M, space=space)


def evaluate_fe(space: FeSpace, coeffs_vec, element: int, points):
    """Value and gradient of a finite element function at reference points of one element.

    Parameters
    ----------
    space : FeSpace
    coeffs_vec : full or free DOF vector
    element : triangle index
    points : (Q, 2) reference coordinates

    Returns
    -------
    values : (Q,) array
    gradients : (Q, 2) array
    """
    if not 0 <= element < space.mesh.n_triangles:
        raise IndexError(f"element {element} out of range")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    vals, grads = space.element_values(coeffs_vec, pts, elements=np.array([element]))
    return vals[0], grads[0]


def prolong(coarse: FeSpace, vec, fine: FeSpace) -> np.ndarray:
    """Interpolate a coarse function at the Lagrange nodes of a refined space.

    ``fine.mesh.parent`` must map fine triangles to triangles of ``coarse.mesh``.
    The result is exact whenever the coarse space is contained in the fine one.
    """
    parent = fine.mesh.parent
    if parent is None:
        raise ValueError("fine mesh has no parent map")
    full = coarse.expand(vec)
    nodes = fine.map_points(np.arange(fine.mesh.n_triangles), reference_nodes(fine.degree))
    ref = coarse.to_reference(parent, nodes)
    phi, _ = reference_basis(coarse.degree, ref)
    vals = np.einsum("kqi,ki->kq", phi, full[coarse.dof_map[parent]])
    out = np.empty(fine.n_dofs)
    out[fine.dof_map.ravel()] = vals.ravel()
    return out
