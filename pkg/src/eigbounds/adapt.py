"""Adaptive loop: solve, estimate, mark, refine."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .eigensolve import solve_gevp
from .estimator import (
    BoundsRecord,
    classical_indicators,
    closeness_test,
    flux_indicators,
    lower_bound_higher,
    lower_bound_principal,
    next_distinct,
)
from .fem import FeSpace, ProblemCoefficients, assemble_forms, prolong
from .flux import reconstruct_flux, equilibration_residuals
from .mesh import Mesh, bisect

log = logging.getLogger(__name__)

CONVERGED = "converged"
UNCONVERGED = "unconverged"
MACHINE_CONVERGED = "machine-converged"

# extra pairs computed on the final mesh so that clusters can be skipped
_FINAL_EXTRA = 3


class ConfigError(ValueError):
    pass


class MarkingError(ValueError):
    """All indicators vanish; nothing can be marked."""


@dataclass
class AdaptConfig:
    target_index: int = 1
    theta: float = 0.5
    ereltol: float = 0.01
    max_steps: int = 60
    max_dofs: int = 400_000

    def __post_init__(self):
        if int(self.target_index) != self.target_index or self.target_index < 1:
            raise ConfigError("target_index must be a positive integer")
        if not 0.0 < self.theta <= 1.0:
            raise ConfigError("theta must lie in (0, 1]")
        if not self.ereltol > 0.0:
            raise ConfigError("ereltol must be positive")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be nonnegative")
        if self.max_dofs < 1:
            raise ConfigError("max_dofs must be positive")


@dataclass
class StepStats:
    """Per-step diagnostics besides the bounds."""

    step: int
    n_elements: int
    max_aspect: float
    eta_r: float
    equilibration: float
    efficiency_ratio: float
    n_marked: int = 0


@dataclass
class RunHistory:
    """Everything a run produced, step by step.

    ``final_next_lowers`` holds lower bounds of the eigenvalues following the
    target, computed on the final mesh; they feed the closeness test unless a
    dedicated run supplies better ones.
    """

    config: AdaptConfig
    degree: int
    records: list[BoundsRecord] = field(default_factory=list)
    stats: list[StepStats] = field(default_factory=list)
    status: str = UNCONVERGED
    final_next_lowers: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    final_mesh: Mesh | None = None

    @property
    def final(self) -> BoundsRecord:
        return self.records[-1]

    @property
    def n_steps(self) -> int:
        return len(self.records)


def mark_dorfler(indicators, theta: float) -> np.ndarray:
    """Minimal set with ``sum eta_K^2 >= theta^2 sum eta^2``.

    Elements enter by decreasing indicator, ties broken by index, so the set
    always contains an element of maximal indicator.
    """
    eta = np.asarray(indicators, dtype=float)
    if not 0.0 < theta <= 1.0:
        raise ConfigError("theta must lie in (0, 1]")
    if eta.size == 0 or np.any(eta < 0) or not np.all(np.isfinite(eta)):
        raise ValueError("indicators must be finite and nonnegative")
    order = np.lexsort((np.arange(eta.size), -eta))
    cum = np.cumsum(eta[order] ** 2)
    total = cum[-1]
    if total == 0.0:
        raise MarkingError("all indicators vanish")
    count = int(np.searchsorted(cum, theta**2 * total, side="left")) + 1
    return np.sort(order[:min(count, eta.size)])


def _bounds_for(space, coeffs, pair, lower1):
    flux = reconstruct_flux(space, coeffs, pair)
    ind = flux_indicators(space, coeffs, pair, flux)
    eta = ind.eta_global
    if pair.index == 1:
        return lower_bound_principal(pair.value, eta), eta, flux, ind
    return lower_bound_higher(pair.value, eta, lower1), eta, flux, ind


def run_adaptive(
    mesh0: Mesh,
    coeffs: ProblemCoefficients,
    config: AdaptConfig,
    degree: int = 1,
    lower1: float | None = None,
    callback: Callable | None = None,
) -> RunHistory:
    """Adapt the mesh to eigenvalue ``config.target_index`` until the bounds are close.

    Parameters
    ----------
    lower1 : principal lower bound used for indices >= 2. If omitted, the
        bound of the first eigenvalue on the current mesh is used.
    callback : called as ``callback(history, context)`` after every step,
        where ``context`` holds the mesh, space, pair and flux of the step.
    """
    i = config.target_index
    hist = RunHistory(config=config, degree=degree)
    mesh = mesh0
    prev_space = prev_vec = None
    step = 0
    while True:
        step += 1
        space = FeSpace(mesh, degree)
        forms = assemble_forms(space, coeffs)
        if i > space.n_free:
            raise ConfigError(f"target index {i} exceeds the {space.n_free} free DOFs of the mesh")
        pairs = solve_gevp(forms, min(i + 1, space.n_free))
        if prev_vec is not None:
            old = prolong(prev_space, prev_vec, space)[space.free_dofs]
            if pairs[i - 1].vector @ (forms.mass @ old) < 0:
                pairs[i - 1].vector = -pairs[i - 1].vector
        pair = pairs[i - 1]

        if i == 1:
            source = "self"
            l1 = None
        elif lower1 is not None:
            source = "given"
            l1 = lower1
        else:
            source = "same-mesh"
            l1, _, _, _ = _bounds_for(space, coeffs, pairs[0], None)
        lower, eta, flux, ind = _bounds_for(space, coeffs, pair, l1)
        eta_r = classical_indicators(space, coeffs, pair)
        report = equilibration_residuals(space, coeffs, pair, flux)
        patch_r2 = mesh.element_neighbours @ (eta_r**2)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(patch_r2 > 0, ind.per_element_flux**2 / patch_r2, 0.0)

        rec = BoundsRecord(
            eigen_index=i,
            upper=pair.value,
            lower=lower,
            eta=eta,
            ndof=space.n_free,
            step=step,
            lower1_source=source,
        )
        st = StepStats(
            step=step,
            n_elements=mesh.n_triangles,
            max_aspect=mesh.max_shape_ratio,
            eta_r=float(np.sqrt(np.sum(eta_r**2))),
            equilibration=report.max_relative,
            efficiency_ratio=float(ratio.max()),
        )
        if hist.records:
            before = hist.records[-1]
            if rec.upper > before.upper * (1 + 1e-10):
                hist.warnings.append(f"step {step}: upper bound increased from {before.upper!r} to {rec.upper!r}")
            if rec.lower < before.lower:
                hist.warnings.append(f"step {step}: lower bound decreased from {before.lower!r} to {rec.lower!r}")
        hist.records.append(rec)
        hist.stats.append(st)
        log.info("step %d ndof %d upper %.10g lower %.10g erel %.3e", step, rec.ndof, rec.upper, rec.lower, rec.erel_est)

        done = None
        if rec.erel_est <= config.ereltol:
            done = CONVERGED
        elif eta == 0.0:
            done = MACHINE_CONVERGED
        elif step - 1 >= config.max_steps or space.n_free >= config.max_dofs:
            done = UNCONVERGED

        marked = None
        if done is None:
            try:
                marked = mark_dorfler(ind.per_element_flux, config.theta)
            except MarkingError:
                done = MACHINE_CONVERGED
        if done is not None:
            hist.status = done
            hist.final_mesh = mesh
            hist.final_next_lowers = _final_next_lowers(space, forms, coeffs, i, lower, l1, pairs)
            if callback is not None:
                callback(hist, dict(mesh=mesh, space=space, pair=pair, flux=flux, final=True))
            break
        st.n_marked = int(marked.size)
        if callback is not None:
            callback(hist, dict(mesh=mesh, space=space, pair=pair, flux=flux, final=False))
        prev_space, prev_vec = space, pair.vector
        mesh = bisect(mesh, marked)

    backfill_closeness(hist)
    return hist


def _final_next_lowers(space, forms, coeffs, i, lower_i, lower1, pairs) -> list[float]:
    """Lower bounds of eigenvalues i+1, i+2, ... on the final mesh.

    Stops after the first value distinct from ``lower_i``; extra pairs are
    only computed when a cluster requires them.
    """
    l1 = lower_i if i == 1 else lower1
    count = min(i + 1 + _FINAL_EXTRA, space.n_free)
    if count > len(pairs):
        pairs = solve_gevp(forms, count)
    out = []
    for pair in pairs[i:count]:
        try:
            low, _, _, _ = _bounds_for(space, coeffs, pair, l1)
        except Exception as exc:  # reported, the run itself is unaffected
            log.warning("no lower bound for eigenvalue %d on the final mesh: %s", pair.index, exc)
            break
        out.append(low)
        value, _ = next_distinct(lower_i, [low])
        if value is not None:
            break
    return out


def backfill_closeness(hist: RunHistory, next_lowers: list[float] | None = None) -> None:
    """Evaluate the closeness test for every step against the final lower bounds.

    ``next_lowers`` are final lower bounds of the following eigenvalues in
    increasing index order; defaults to those computed on the run's final
    mesh. Equal values (a cluster) are skipped and the record is flagged.
    """
    if not hist.records:
        return
    candidates = hist.final_next_lowers if next_lowers is None else next_lowers
    final_lower = hist.final.lower
    nxt, skipped = next_distinct(final_lower, candidates)
    for rec in hist.records:
        rec.cluster_substituted = skipped
        if nxt is None or final_lower <= 0:
            rec.closeness_pass = None
        else:
            rec.closeness_pass = closeness_test(rec.upper, final_lower, nxt)
