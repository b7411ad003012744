"""Error indicators, guaranteed lower bounds and the closeness test."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .eigensolve import EigenPair
from .fem import FeSpace, ProblemCoefficients, reference_basis
from .flux import FluxField
from .mesh import EDGE_INTERIOR, EDGE_NEUMANN
from .quadrature import line_rule, triangle_rule

CLUSTER_RTOL = 1e-12

_einsum = partial(np.einsum, optimize=True)


@dataclass
class IndicatorSet:
    """Per-element indicators and their root-sum-square totals."""

    per_element_flux: np.ndarray
    per_element_classical: np.ndarray | None = None

    @property
    def eta_global(self) -> float:
        return float(np.sqrt(np.sum(self.per_element_flux**2)))

    @property
    def eta_r_global(self) -> float | None:
        if self.per_element_classical is None:
            return None
        return float(np.sqrt(np.sum(self.per_element_classical**2)))


@dataclass
class BoundsRecord:
    """Two-sided bounds of one eigenvalue at one adaptive step."""

    eigen_index: int
    upper: float
    lower: float
    eta: float
    ndof: int
    step: int
    closeness_pass: bool | None = None
    lower1_source: str = ""
    cluster_substituted: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def erel_est(self) -> float:
        return (self.upper - self.lower) / self.lower


def _edge_points(mesh, edges, t):
    v0 = mesh.vertices[mesh.edges[edges, 0]]
    v1 = mesh.vertices[mesh.edges[edges, 1]]
    return v0[:, None, :] + t[None, :, None] * (v1 - v0)[:, None, :]


def classical_indicators(space: FeSpace, coeffs: ProblemCoefficients, pair: EigenPair) -> np.ndarray:
    """Residual indicators ``eta_{R,K}^2 = h_K^2 ||R||_K^2 + h_K ||J||_{dK}^2``.

    ``R = -div(A grad u) + c u - lam beta1 u``; ``J`` is the normal-flux jump on
    interior edges, ``(A grad u).n - lam beta2 u + alpha u`` on Neumann edges
    and zero on Dirichlet edges. Each edge norm enters both neighbours.
    """
    mesh = space.mesh
    p = space.degree
    lam = float(pair.value)
    u = space.expand(pair.vector)
    A = coeffs.element_diffusion(mesh)
    c = coeffs.element_reaction(mesh)
    b1 = coeffs.element_weight(mesh)

    ref, w = triangle_rule(2 * p)
    uq, _ = space.element_values(u, ref)
    div_flux = _einsum("kxy,kxy->k", A, space.element_hessians(u))
    R = -div_flux[:, None] + (c - lam * b1)[:, None] * uq
    R2 = 2.0 * mesh.areas * (R**2 @ w)

    t, wt = line_rule(2 * p)
    J2 = np.zeros(mesh.n_edges)
    inner = np.flatnonzero(mesh.edge_kind == EDGE_INTERIOR)
    flux_n = []
    for side in (0, 1):
        K = mesh.edge_tris[inner, side]
        x = _edge_points(mesh, inner, t)
        vals = _gradients_at(space, u, K, x)
        flux_n.append(_einsum("jxy,jqy,jx->jq", A[K], vals, mesh.edge_normals[inner]))
    J = flux_n[0] - flux_n[1]
    J2[inner] = mesh.edge_lengths[inner] * (J**2 @ wt)

    neu = np.flatnonzero(mesh.edge_kind == EDGE_NEUMANN)
    if neu.size:
        K = mesh.edge_tris[neu, 0]
        x = _edge_points(mesh, neu, t)
        g = _gradients_at(space, u, K, x)
        normal = mesh.edge_normals[neu] * mesh.boundary_signs[neu][:, None]
        ue = space.edge_values(u, t, neu)
        Jn = _einsum("jxy,jqy,jx->jq", A[K], g, normal)
        Jn += (coeffs.edge_robin(mesh)[neu] - lam * coeffs.edge_weight(mesh)[neu])[:, None] * ue
        J2[neu] = mesh.edge_lengths[neu] * (Jn**2 @ wt)

    h = mesh.diameters
    eta2 = h**2 * R2 + h * J2[mesh.tri_edges].sum(axis=1)
    return np.sqrt(eta2)


def _gradients_at(space, u, elements, x):
    ref = space.to_reference(elements, x)
    _, dphi = reference_basis(space.degree, ref)
    coef = u[space.dof_map[elements]]
    gref = _einsum("ki,kqir->kqr", coef, dphi)
    return _einsum("kqr,krx->kqx", gref, space.inverse_jacobians[elements])


def flux_indicators(
    space: FeSpace,
    coeffs: ProblemCoefficients,
    pair: EigenPair,
    flux: FluxField,
    classical: np.ndarray | None = None,
) -> IndicatorSet:
    """``eta_K = ||grad u - A^{-1} q||_{A,K}`` by exact quadrature."""
    mesh = space.mesh
    p = space.degree
    u = space.expand(pair.vector)
    A = coeffs.element_diffusion(mesh)
    # RT_p components have degree p + 1
    ref, w = triangle_rule(2 * p + 2)
    _, gu = space.element_values(u, ref)
    q, _ = flux.evaluate_reference(ref)
    diff = gu - _einsum("kxy,kqy->kqx", np.linalg.inv(A), q)
    dens = _einsum("kqx,kxy,kqy->kq", diff, A, diff)
    eta2 = 2.0 * mesh.areas * (dens @ w)
    return IndicatorSet(np.sqrt(np.maximum(eta2, 0.0)), classical)


def lower_bound_principal(upper: float, eta: float) -> float:
    """``(-eta + sqrt(eta^2 + 4 upper))^2 / 4``."""
    if eta < 0 or upper <= 0:
        raise ValueError("need eta >= 0 and a positive upper bound")
    # rationalized form avoids cancellation when eta^2 >> upper
    root = 2.0 * upper / (eta + math.sqrt(eta * eta + 4.0 * upper))
    return root * root


def lower_bound_higher(upper: float, eta: float, lower1: float) -> float:
    """``upper / (1 + eta / sqrt(lower1))``."""
    if eta < 0 or upper <= 0:
        raise ValueError("need eta >= 0 and a positive upper bound")
    if lower1 <= 0:
        raise ValueError("the principal lower bound must be positive")
    return upper / (1.0 + eta / math.sqrt(lower1))


def closeness_threshold(final_lower_i: float, final_lower_next: float) -> float:
    if final_lower_i <= 0 or final_lower_next <= 0:
        raise ValueError("final lower bounds must be positive")
    return 2.0 / (1.0 / final_lower_i + 1.0 / final_lower_next)


def closeness_test(upper_i: float, final_lower_i: float, final_lower_next: float) -> bool:
    """``upper_i <= 2 / (1/lower_i + 1/lower_next)``."""
    return bool(upper_i <= closeness_threshold(final_lower_i, final_lower_next))


def next_distinct(final_lower_i: float, candidates) -> tuple[float | None, bool]:
    """First candidate not equal to ``final_lower_i`` within CLUSTER_RTOL.

    Returns the value and whether any candidate was skipped as part of a cluster.
    """
    skipped = False
    for v in candidates:
        if abs(v - final_lower_i) <= CLUSTER_RTOL * abs(final_lower_i):
            skipped = True
            continue
        return float(v), skipped
    return None, skipped
