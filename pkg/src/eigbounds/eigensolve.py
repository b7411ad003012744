"""Smallest eigenpairs of the discrete symmetric-definite problem K u = lambda M u."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import AssembledForms

RESIDUAL_RTOL = 1e-9


class EigenSolveError(RuntimeError):
    """Raised when the discrete eigenproblem cannot be solved as requested."""


@dataclass
class EigenPair:
    """Approximate eigenpair; ``vector`` lives on the free DOFs and has unit b-seminorm."""

    index: int
    value: float
    vector: np.ndarray


def _dense(K, M, m):
    Kd = K.toarray() if sp.issparse(K) else np.asarray(K, dtype=float)
    Md = M.toarray() if sp.issparse(M) else np.asarray(M, dtype=float)
    try:
        # invert the pencil so that a semidefinite M is harmless
        mu, vecs = sla.eigh(Md, Kd)
    except np.linalg.LinAlgError as exc:
        raise EigenSolveError(f"stiffness matrix is not positive definite: {exc}") from None
    order = np.argsort(-mu)
    return mu[order][:m], vecs[:, order[:m]]


def solve_gevp(forms: AssembledForms, count: int) -> list[EigenPair]:
    """Return the ``count`` smallest eigenpairs in nondecreasing order.

    Uses shift-invert Lanczos (ARPACK) at shift zero, i.e. Lanczos for
    K^{-1} M in the M inner product, started from the all-ones vector.
    Tiny systems go to a dense solver. Eigenvectors are b-orthonormalised.
    """
    K, M = forms.stiffness, forms.mass
    n = K.shape[0]
    if count < 1:
        raise ValueError("count must be positive")
    if count > n:
        raise EigenSolveError(f"requested {count} eigenpairs but the space has only {n} free DOFs")

    if count >= n - 1:
        mu, vecs = _dense(K, M, count)
    else:
        mu, vecs = _shift_invert(K, M, count)

    if np.any(mu <= 0):
        raise EigenSolveError(
            f"only {int(np.sum(mu > 0))} finite eigenvalues available (b has a large kernel)"
        )
    lam = 1.0 / mu
    pairs = []
    for i in range(count):
        v = vecs[:, i]
        v = v / np.sqrt(v @ (M @ v))
        # deterministic sign: largest-magnitude entry positive
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        pairs.append(EigenPair(index=i + 1, value=float(lam[i]), vector=v))
    _b_orthonormalize(pairs, M)
    for p in pairs:
        p.value = float((p.vector @ (K @ p.vector)) / (p.vector @ (M @ p.vector)))
    return pairs


def _shift_invert(K, M, count):
    # ARPACK mode 3 with sigma = 0: Lanczos on K^{-1} M in the M inner product
    n = K.shape[0]
    try:
        lu = spla.splu(sp.csc_matrix(K))
    except RuntimeError as exc:
        raise EigenSolveError(f"factorization of the stiffness matrix failed: {exc}") from None
    op = spla.LinearOperator((n, n), matvec=lambda x: lu.solve(np.asarray(x, dtype=float).ravel()), dtype=float)
    # a couple of extra vectors resolve clusters at the end of the wanted range
    k = min(n - 1, count + 2)
    ncv = min(n, max(2 * k + 1, 20))
    v0 = np.ones(n) / np.sqrt(n)
    if abs(v0 @ (M @ v0)) < 1e-14:
        v0 = np.random.default_rng(0).standard_normal(n)
    try:
        lam, vecs = spla.eigsh(K, k=k, M=M, sigma=0.0, which="LM", OPinv=op, v0=v0, ncv=ncv)
    except spla.ArpackNoConvergence as exc:
        raise EigenSolveError(f"Lanczos iteration did not converge: {exc}") from None
    except spla.ArpackError as exc:
        # typically an invariant subspace smaller than requested: b has a large kernel
        raise EigenSolveError(f"Lanczos iteration broke down ({exc}); too few finite eigenvalues?") from None
    with np.errstate(divide="ignore"):
        mu = np.where(lam != 0, 1.0 / lam, np.inf)
    order = np.argsort(-mu)
    return mu[order][:count], vecs[:, order[:count]]


def _b_orthonormalize(pairs, M):
    # clustered pairs may come back with tiny cross terms; Gram-Schmidt in b
    for i, p in enumerate(pairs):
        v = p.vector
        for q in pairs[:i]:
            v = v - (q.vector @ (M @ v)) * q.vector
        p.vector = v / np.sqrt(v @ (M @ v))


def residual_norms(forms: AssembledForms, pairs) -> np.ndarray:
    """Relative residuals ||K v - lambda M v|| / ||K v||."""
    K, M = forms.stiffness, forms.mass
    out = []
    for p in pairs:
        Kv = K @ p.vector
        out.append(np.linalg.norm(Kv - p.value * (M @ p.vector)) / np.linalg.norm(Kv))
    return np.array(out)
