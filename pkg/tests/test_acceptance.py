"""Acceptance suite: one test per criterion, each reported as a PASS/FAIL line."""

import warnings

import numpy as np
import pytest

from eigbounds.adapt import CONVERGED, AdaptConfig, run_adaptive
from eigbounds.eigensolve import solve_gevp
from eigbounds.estimator import closeness_threshold
from eigbounds.fem import assemble_forms
from eigbounds.flux import patch_data, rt_patch_space, solve_patch
from eigbounds.mesh import build_patch, uniform_refine
from eigbounds.presets import exact_eigenvalues, preset_domain

from cases import random_patches, small_eigen_problems
from oracles import dense_eigenvalues, patch_least_squares
from runs import ORACLE_MAX_DOFS, all_runs, criterion, dumbbell_runs, square_run

pytestmark = pytest.mark.slow


def test_criterion_1_square_sandwich():
    with criterion(1, "square-dirichlet sandwich, indices 1 and 4") as notes:
        exact = exact_eigenvalues("square-dirichlet", 4)
        run = square_run(1)
        final = run.hist.final
        notes.append(f"index 1: [{final.lower:.6f}, {final.upper:.6f}], gap {final.erel_est:.4f}, {run.seconds:.1f} s")
        assert run.hist.status == CONVERGED, f"index 1 run ended {run.hist.status}"
        assert final.lower <= exact[0] <= final.upper, "index 1 interval misses 2"
        assert final.erel_est <= 0.01
        assert run.seconds <= 60.0, f"index 1 run took {run.seconds:.1f} s"

        run4 = square_run(4)
        for rec in run4.hist.records:
            assert rec.lower <= exact[3] <= rec.upper, f"index 4 step {rec.step} misses 8"
        final4 = run4.hist.final
        notes.append(
            f"index 4: [{final4.lower:.6f}, {final4.upper:.6f}] at {final4.ndof} DOFs after {final4.step} steps"
        )

        # the double eigenvalue 5: on a symmetric mesh the final bounds of indices 2
        # and 3 coincide and the closeness test moves on to the next distinct bound
        mesh, coeffs = preset_domain("square-dirichlet")
        hist = run_adaptive(
            uniform_refine(mesh, 2), coeffs, AdaptConfig(target_index=2, max_steps=0), lower1=run.hist.final.lower
        )
        low2, low3 = hist.final.lower, hist.final_next_lowers[0]
        assert low2 <= 5.0 <= hist.final.upper
        assert abs(low3 - low2) <= 1e-12 * low2
        assert hist.final.cluster_substituted, "cluster substitution not flagged"
        notes.append("cluster 2,3 flagged")


def test_criterion_2_dumbbell_first_eigenvalue():
    with criterion(2, "dumbbell lambda_1 against [0.1391, 0.1405]") as notes:
        run, _ = dumbbell_runs()
        final = run.hist.final
        notes.append(f"[{final.lower:.6f}, {final.upper:.6f}] with {final.ndof} DOFs, {run.seconds:.1f} s")
        assert run.hist.status == CONVERGED
        assert final.lower <= 0.1405 and final.upper >= 0.1391
        assert 20347 / 4 <= final.ndof <= 20347 * 4


def test_criterion_3_dumbbell_second_eigenvalue():
    with criterion(3, "dumbbell lambda_2 against [0.1492, 0.1507]") as notes:
        _, run = dumbbell_runs()
        final = run.hist.final
        notes.append(f"[{final.lower:.6f}, {final.upper:.6f}] with {final.ndof} DOFs, {run.seconds:.1f} s")
        assert run.hist.status == CONVERGED
        assert final.lower <= 0.1507 and final.upper >= 0.1492


def test_criterion_4_equilibration():
    with criterion(4, "equilibration residuals on every step") as notes:
        worst = 0.0
        for run in all_runs():
            for st in run.hist.stats:
                assert st.equilibration <= 1e-8, f"{run.name} step {st.step}: {st.equilibration:.2e}"
                worst = max(worst, st.equilibration)
        notes.append(f"max relative residual {worst:.1e}")


def test_criterion_5_guaranteed_bound_against_oracle():
    with criterion(5, f"||w||_a <= 1.05 eta on steps with <= {ORACLE_MAX_DOFS} DOFs") as notes:
        count, worst = 0, 0.0
        for run in all_runs():
            assert run.oracle, f"{run.name} has no step small enough"
            for step, ndof, w, eta in run.oracle:
                assert w <= 1.05 * eta, f"{run.name} step {step} ({ndof} DOFs): {w:.6g} > 1.05 * {eta:.6g}"
                count += 1
                worst = max(worst, w / eta)
        notes.append(f"{count} steps, max ||w||_a / eta = {worst:.3f}")


def test_criterion_6_monotonicity():
    with criterion(6, "upper bounds nonincreasing") as notes:
        decreases = 0
        for run in all_runs():
            upper = np.array([r.upper for r in run.hist.records])
            lower = np.array([r.lower for r in run.hist.records])
            bad = np.flatnonzero(upper[1:] > upper[:-1])
            assert bad.size == 0, f"{run.name}: upper bound rises at step {bad[0] + 2}"
            drops = np.flatnonzero(lower[1:] < lower[:-1])
            for k in drops:
                warnings.warn(f"{run.name}: lower bound decreases at step {k + 2}", stacklevel=1)
            decreases += drops.size
        notes.append(f"{decreases} lower-bound decreases reported as warnings")


def test_criterion_7_estimator_efficiency():
    with criterion(7, "efficiency ratio bounded without upward trend") as notes:
        for run in all_runs():
            ratio = np.array([s.efficiency_ratio for s in run.hist.stats])
            assert np.all(np.isfinite(ratio)) and np.all(ratio > 0)
            half = ratio.size // 2
            early, late = ratio[:half].max(), ratio[half:].max()
            # a drifting constant would show up as a larger maximum in the later half
            assert late <= 1.5 * early, f"{run.name}: ratio grows from {early:.3g} to {late:.3g}"
            notes.append(f"{run.name} max {ratio.max():.3g}")


def test_criterion_8_solvers_against_dense_oracles():
    with criterion(8, "eigensolver and patch solver against dense oracles") as notes:
        for space, coeffs in small_eigen_problems():
            assert space.n_free <= 200
            forms = assemble_forms(space, coeffs)
            count = min(6, space.n_free)
            got = np.array([p.value for p in solve_gevp(forms, count)])
            ref = dense_eigenvalues(forms.stiffness, forms.mass, count)
            assert np.all(np.abs(got - ref) <= 1e-9 * ref), "eigenvalues differ from the dense oracle"
        patches = random_patches()
        assert len(patches) >= 20
        for space, coeffs, pair, vertex in patches:
            patch = build_patch(space.mesh, vertex)
            local = solve_patch(
                rt_patch_space(space.mesh, patch, space.degree), patch_data(space, coeffs, pair, patch), pair
            )
            oracle = patch_least_squares(space, coeffs, pair, vertex)
            assert np.abs(local.element_dofs - oracle).max() <= 1e-10 * max(1.0, np.abs(oracle).max())
        notes.append(f"{len(small_eigen_problems())} eigenproblems, {len(patches)} patches")


def test_criterion_9_closeness():
    with criterion(9, "closeness test of dumbbell lambda_1") as notes:
        first, second = dumbbell_runs()
        threshold = closeness_threshold(first.hist.final.lower, second.hist.final.lower)
        notes.append(f"threshold {threshold:.5f} vs upper {first.hist.final.upper:.5f}")
        assert first.hist.final.closeness_pass is True
        assert first.hist.final.upper <= threshold
        assert not first.hist.final.cluster_substituted
