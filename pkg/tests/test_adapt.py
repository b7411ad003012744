import numpy as np
import pytest
from hypothesis import given, strategies as st

from eigbounds.adapt import (
    CONVERGED,
    UNCONVERGED,
    AdaptConfig,
    ConfigError,
    MarkingError,
    mark_dorfler,
    run_adaptive,
)
from eigbounds.mesh import load_mesh
from eigbounds.presets import exact_eigenvalues, preset_domain

from meshes import right_triangle_document


# ---------------------------------------------------------------------- marking


def test_dorfler_marks_dominant_element():
    # [DERIVED] eta^2 = {9, 4, 1}, theta = 0.5: 9 >= 0.25 * 14 = 3.5
    eta = np.sqrt([9.0, 4.0, 1.0])
    assert mark_dorfler(eta, 0.5).tolist() == [0]


def test_dorfler_theta_one_marks_every_positive_indicator():
    eta = np.array([0.0, 2.0, 1.0, 0.0, 3.0])
    assert mark_dorfler(eta, 1.0).tolist() == [1, 2, 4]


def test_dorfler_single_element():
    assert mark_dorfler([0.7], 0.3).tolist() == [0]


def test_dorfler_ties_go_to_lower_index():
    assert mark_dorfler([1.0, 1.0, 1.0, 1.0], 0.5).tolist() == [0]
    assert mark_dorfler([1.0, 2.0, 2.0], 0.5).tolist() == [1]


def test_dorfler_errors():
    with pytest.raises(MarkingError):
        mark_dorfler([0.0, 0.0], 0.5)
    with pytest.raises(ValueError):
        mark_dorfler([1.0, -1.0], 0.5)
    with pytest.raises(ValueError):
        mark_dorfler([1.0, np.nan], 0.5)
    with pytest.raises(ConfigError):
        mark_dorfler([1.0], 0.0)


indicator_lists = st.lists(st.floats(0.0, 1e3, allow_nan=False), min_size=1, max_size=60).filter(
    lambda v: sum(x * x for x in v) > 0
)


@given(indicator_lists, st.floats(0.01, 1.0))
def test_dorfler_set_is_minimal_and_sufficient(values, theta):
    eta = np.array(values)
    marked = mark_dorfler(eta, theta)
    total = np.sum(eta**2)
    assert np.sum(eta[marked] ** 2) >= theta**2 * total * (1 - 1e-12)
    assert np.argmax(eta) in marked
    # no smaller set reaches the threshold: the largest len(marked) - 1 fall short
    best = np.sort(eta**2)[::-1][: marked.size - 1].sum()
    assert best < theta**2 * total
    assert np.all(np.diff(marked) > 0)


# ---------------------------------------------------------------------- configuration


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(theta=0.0),
        dict(theta=1.5),
        dict(ereltol=0.0),
        dict(target_index=0),
        dict(target_index=1.5),
        dict(max_steps=-1),
        dict(max_dofs=0),
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        AdaptConfig(**kwargs)


def test_target_index_beyond_free_dofs():
    mesh, coeffs = preset_domain("square-dirichlet")
    with pytest.raises(ConfigError, match="exceeds"):
        run_adaptive(mesh, coeffs, AdaptConfig(target_index=10))


def test_no_free_dofs():
    with pytest.raises(ConfigError):
        run_adaptive(load_mesh(right_triangle_document()), preset_domain("square-dirichlet")[1], AdaptConfig())


# ---------------------------------------------------------------------- the loop


def test_loose_tolerance_stops_after_one_step():
    mesh, coeffs = preset_domain("square-dirichlet")
    hist = run_adaptive(mesh, coeffs, AdaptConfig(ereltol=1e6))
    assert hist.status == CONVERGED
    assert hist.n_steps == 1
    assert hist.final.step == 1


def test_max_steps_zero_gives_single_unconverged_row():
    mesh, coeffs = preset_domain("square-dirichlet")
    hist = run_adaptive(mesh, coeffs, AdaptConfig(max_steps=0))
    assert hist.status == UNCONVERGED
    assert hist.n_steps == 1


def test_max_dofs_cap():
    mesh, coeffs = preset_domain("square-dirichlet")
    hist = run_adaptive(mesh, coeffs, AdaptConfig(ereltol=1e-6, max_dofs=200))
    assert hist.status == UNCONVERGED
    assert hist.final.ndof >= 200
    assert all(r.ndof < 200 for r in hist.records[:-1])


@pytest.fixture(scope="module")
def short_run():
    mesh, coeffs = preset_domain("square-dirichlet")
    seen = []
    hist = run_adaptive(mesh, coeffs, AdaptConfig(ereltol=0.1), callback=lambda h, ctx: seen.append((len(h.records), ctx)))
    return hist, seen


def test_history_invariants(short_run):
    hist, _ = short_run
    steps = [r.step for r in hist.records]
    ndof = [r.ndof for r in hist.records]
    assert steps == list(range(1, hist.n_steps + 1))
    assert np.all(np.diff(ndof) >= 0)
    assert len(hist.stats) == hist.n_steps
    assert [s.n_elements for s in hist.stats] == sorted(s.n_elements for s in hist.stats)
    assert hist.status == CONVERGED
    assert hist.final.erel_est <= 0.1
    assert all(r.erel_est > 0.1 for r in hist.records[:-1])


def test_bounds_enclose_exact_value(short_run):
    hist, _ = short_run
    exact = exact_eigenvalues("square-dirichlet", 1)[0]
    for r in hist.records:
        assert r.lower <= exact <= r.upper
        assert r.lower1_source == "self"


def test_upper_bounds_do_not_increase(short_run):
    hist, _ = short_run
    uppers = np.array([r.upper for r in hist.records])
    assert np.all(uppers[1:] <= uppers[:-1] * (1 + 1e-10))


def test_callback_sees_every_step(short_run):
    hist, seen = short_run
    assert [n for n, _ in seen] == list(range(1, hist.n_steps + 1))
    assert [ctx["final"] for _, ctx in seen] == [False] * (hist.n_steps - 1) + [True]
    assert seen[-1][1]["mesh"] is hist.final_mesh
    assert seen[-1][1]["space"].n_free == hist.final.ndof


def test_closeness_is_backfilled(short_run):
    hist, _ = short_run
    assert hist.final_next_lowers
    assert all(r.closeness_pass is not None for r in hist.records)


def test_marking_follows_indicators(short_run):
    hist, _ = short_run
    assert all(s.n_marked >= 1 for s in hist.stats[:-1])
    assert all(0 < s.equilibration <= 1e-8 for s in hist.stats)


def test_higher_index_uses_given_principal_bound():
    mesh, coeffs = preset_domain("square-dirichlet")
    hist = run_adaptive(mesh, coeffs, AdaptConfig(target_index=4, max_steps=2), lower1=1.9)
    assert {r.lower1_source for r in hist.records} == {"given"}
    same = run_adaptive(mesh, coeffs, AdaptConfig(target_index=4, max_steps=2))
    assert {r.lower1_source for r in same.records} == {"same-mesh"}
    for r in hist.records + same.records:
        assert r.lower <= 8.0 <= r.upper


def test_deterministic():
    mesh, coeffs = preset_domain("dumbbell")
    a = run_adaptive(mesh, coeffs, AdaptConfig(max_steps=3))
    b = run_adaptive(mesh, coeffs, AdaptConfig(max_steps=3))
    assert [(r.upper, r.lower, r.ndof) for r in a.records] == [(r.upper, r.lower, r.ndof) for r in b.records]
