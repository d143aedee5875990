import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from incidentflow.exceptions import DomainError, InsufficientHistoryError, NotFittedError
from incidentflow.syncontrol import (
    DonorSet,
    SynthConfig,
    SyntheticControl,
    build_donor_set,
    cell_seed,
    counterfactual,
    estimate_effect,
    fit_with_v,
    optimize_v,
    outer_objective,
    project_simplex,
    solve_weights,
)
from incidentflow.panel_io import IncidentRecord

from conftest import make_panel
from oracles import grid_vnorm_min


def donor_set(A, a, y=None, X=None, X0=None):
    A = np.asarray(A, float)
    n = A.shape[0]
    y = np.arange(n, dtype=float) if y is None else y
    X = np.zeros((1, n)) if X is None else X
    X0 = np.zeros(1) if X0 is None else X0
    return DonorSet(A, y, X, a, X0)


def on_simplex(w, tol=1e-9):
    return np.all(w >= -tol) and abs(w.sum() - 1.0) <= tol


def test_exact_match_donor_gets_all_weight():
    A = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]])
    w, obj = solve_weights(donor_set(A, A[1]), np.ones(2))
    np.testing.assert_allclose(w, [0, 1, 0], atol=1e-9)
    assert obj == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("v", [(1.0, 1.0), (0.1, 5.0)])
def test_single_donor(v):
    w, _ = solve_weights(donor_set([[4.0, 4.0]], np.array([0.0, 1.0])), np.array(v))
    np.testing.assert_array_equal(w, [1.0])


def test_three_donor_example_against_grid():
    A = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    a = np.array([0.4, 0.3])
    w, obj = solve_weights(donor_set(A, a), np.ones(2))
    assert obj <= grid_vnorm_min(A, a, np.ones(2)) + 1e-3
    # target is inside the hull, so the exact fit reproduces it
    np.testing.assert_allclose(w, [0.3, 0.4, 0.3], atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_solvers_agree_and_stay_on_simplex(n, d, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, d))
    a = rng.normal(size=d)
    v = rng.uniform(0.1, 3.0, size=d)
    ds = donor_set(A, a)
    w1, o1 = solve_weights(ds, v)
    w2, o2 = solve_weights(ds, v, method="pgd", max_iter=50_000, tol=1e-14)
    assert on_simplex(w1) and on_simplex(w2)
    assert o1 <= o2 + 1e-5
    r = w1 @ A - a
    assert o1 == pytest.approx(np.sqrt(r @ (v * r)), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.integers(1, 3), st.floats(0.01, 100.0), st.integers(0, 2**31 - 1))
def test_vnorm_scaling_covariance(n, d, c, seed):
    rng = np.random.default_rng(seed)
    A, a = rng.normal(size=(n, d)), rng.normal(size=d)
    v = rng.uniform(0.2, 2.0, size=d)
    _, base = solve_weights(donor_set(A, a), v)
    A2, a2, v2 = A.copy(), a.copy(), v.copy()
    A2[:, 0] *= c
    a2[0] *= c
    v2[0] /= c * c
    _, scaled = solve_weights(donor_set(A2, a2), v2)
    assert scaled == pytest.approx(base, rel=1e-6, abs=1e-9)


def test_invalid_v_rejected():
    ds = donor_set([[0.0], [1.0]], np.array([0.5]))
    for v in ([0.0], [-1.0], [np.nan], [1.0, 1.0]):
        with pytest.raises(DomainError):
            solve_weights(ds, np.array(v))


def test_project_simplex_matches_kkt():
    rng = np.random.default_rng(0)
    for _ in range(100):
        y = rng.normal(scale=3, size=rng.integers(1, 8))
        w = project_simplex(y)
        assert on_simplex(w)
        # KKT: y - w equals a common theta on the support and is <= theta elsewhere
        theta = (y - w)[w > 0]
        assert np.ptp(theta) < 1e-9
        assert np.all((y - w)[w == 0] <= theta[0] + 1e-9)


def test_optimize_v_one_dimension_is_identity():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(4, 1))
    ds = donor_set(A, np.array([0.2]), X=rng.normal(size=(2, 4)), X0=rng.normal(size=2))
    fit = optimize_v(ds, seed=0)
    np.testing.assert_array_equal(fit.v_diag, [1.0])
    w, _ = solve_weights(ds, np.ones(1))
    np.testing.assert_allclose(fit.weights, w, atol=1e-12)


def test_optimize_v_recovers_planted_weights():
    rng = np.random.default_rng(4)
    n, d = 5, 3
    A = rng.normal(size=(n, d))
    w_star = np.array([0.5, 0.3, 0.2, 0.0, 0.0])
    X = rng.normal(size=(4, n))
    ds = DonorSet(A, rng.normal(size=n), X, w_star @ A, X @ w_star)
    fit = optimize_v(ds, seed=0)
    assert fit.outer_objective < 1e-3


def test_optimize_v_beats_nested_grid_and_identity():
    rng = np.random.default_rng(11)
    n = 3
    A = rng.normal(size=(n, 2))
    a = rng.normal(size=2)
    X = rng.normal(size=(2, n))
    X0 = rng.normal(size=2)
    ds = DonorSet(A, np.zeros(n), X, a, X0)
    fit = optimize_v(ds, seed=0, restarts=3)
    grid = []
    for v1 in np.arange(0.05, 1.951, 0.05):
        w, _ = solve_weights(ds, np.array([v1, 2.0 - v1]))
        grid.append(outer_objective(ds, w))
    assert fit.outer_objective <= min(grid) + 1e-3
    w_id, _ = solve_weights(ds, np.ones(2))
    assert fit.outer_objective <= outer_objective(ds, w_id) + 1e-12
    assert fit.v_diag.sum() == pytest.approx(2.0)


def test_counterfactual_examples():
    ds = donor_set(np.eye(3), np.zeros(3), y=np.full(3, 7.0))
    rng = np.random.default_rng(0)
    assert counterfactual(ds, rng.dirichlet(np.ones(3))) == 7.0
    ds = donor_set(np.eye(3), np.zeros(3), y=np.array([3.0, 9.0, 27.0]))
    assert counterfactual(ds, np.array([1.0, 0.0, 0.0])) == 3.0
    for _ in range(50):
        y = rng.normal(size=3) * 100
        w = rng.dirichlet(np.ones(3))
        ds = donor_set(np.eye(3), np.zeros(3), y=y)
        assert counterfactual(ds, w) == pytest.approx(float(sum(wi * yi for wi, yi in zip(w, y))), abs=1e-12)


def test_counterfactual_vector_outcomes_in_hull():
    rng = np.random.default_rng(2)
    y = rng.normal(size=(4, 3))
    ds = DonorSet(rng.normal(size=(4, 2)), y, rng.normal(size=(2, 4)), rng.normal(size=2), rng.normal(size=2))
    fit = optimize_v(ds, seed=1)
    cf = fit.counterfactual
    assert cf.shape == (3,)
    assert np.all(cf >= y.min(axis=0)) and np.all(cf <= y.max(axis=0))


def test_standardized_constant_column_is_centred_only():
    A = np.array([[1.0, 5.0], [3.0, 5.0], [5.0, 5.0]])
    ds = donor_set(A, np.array([2.0, 5.0])).standardized()
    np.testing.assert_allclose(ds.donor_covariates[:, 1], 0.0)
    np.testing.assert_allclose(ds.donor_covariates[:, 0].std(), 1.0)


# ----------------------------------------------------------- panel level


def _flat_panel(n_days=8, n_int=10, value=50):
    return np.full((1, n_days, n_int), value, dtype=np.int64)


def test_effect_zero_when_incident_day_copies_a_donor():
    rng = np.random.default_rng(5)
    flows = rng.integers(20, 80, size=(1, 8, 10))
    flows[0, 3] = flows[0, 6]
    panel = make_panel(flows)
    inc = IncidentRecord("I", "L", ("A",), 3, 150.0, 200.0)
    est = estimate_effect(panel, [inc], 0, 3, 5)
    assert est.effect == pytest.approx(0.0, abs=1e-6)


def test_injected_effect_recovered_with_noiseless_donors():
    flows = _flat_panel()
    flows[0, 2, 6] += 20
    panel = make_panel(flows)
    inc = IncidentRecord("I", "L", ("A",), 2, 150.0, 200.0)
    est = estimate_effect(panel, [inc], 0, 2, 6)
    assert est.effect == pytest.approx(20.0, abs=1e-6)
    assert est.counterfactual == pytest.approx(50.0, abs=1e-9)


def test_estimate_effect_needs_history():
    panel = make_panel(_flat_panel())
    with pytest.raises(InsufficientHistoryError):
        estimate_effect(panel, [], 0, 0, 1)


def test_estimate_effect_is_deterministic():
    rng = np.random.default_rng(9)
    panel = make_panel(rng.integers(10, 90, size=(2, 12, 10)))
    inc = IncidentRecord("I", "L", ("A",), 4, 120.0, 150.0)
    runs = [estimate_effect(panel, [inc], 1, 4, 6, SynthConfig(seed=3)) for _ in range(2)]
    assert runs[0] == runs[1]


def test_donor_set_uses_pre_period_and_covariates():
    rng = np.random.default_rng(6)
    flows = rng.integers(0, 100, size=(1, 5, 8))
    panel = make_panel(flows, weekend=[0, 0, 1, 0, 1])
    ds = build_donor_set(panel, 0, 0, [1, 2, 3], ref=5, outcome_intervals=6, t_pre=3)
    np.testing.assert_array_equal(ds.donor_pre_outcomes, flows[0, [1, 2, 3], 2:5].T)
    np.testing.assert_array_equal(ds.target_pre_outcomes, flows[0, 0, 2:5])
    np.testing.assert_array_equal(ds.donor_outcomes, flows[0, [1, 2, 3], 6])
    np.testing.assert_array_equal(ds.donor_covariates[:, 1], [0, 1, 0])


def test_estimator_wrapper():
    rng = np.random.default_rng(8)
    ds = DonorSet(rng.normal(size=(4, 2)), rng.normal(size=4), rng.normal(size=(2, 4)),
                  rng.normal(size=2), rng.normal(size=2))
    sc = SyntheticControl(restarts=2, random_state=5)
    with pytest.raises(NotFittedError):
        sc.predict(np.ones(4))
    sc.fit(ds)
    assert on_simplex(sc.weights_)
    assert sc.predict(ds.donor_outcomes) == pytest.approx(ds.donor_outcomes @ sc.weights_)
    assert sc.get_params()["restarts"] == 2


def test_fit_with_v_reports_consistent_objectives():
    rng = np.random.default_rng(12)
    ds = DonorSet(rng.normal(size=(5, 3)), rng.normal(size=5), rng.normal(size=(2, 5)),
                  rng.normal(size=3), rng.normal(size=2))
    v = np.array([0.5, 1.0, 1.5])
    fit = fit_with_v(ds, v)
    assert fit.outer_objective == pytest.approx(outer_objective(ds, fit.weights))
    assert fit.counterfactual == pytest.approx(counterfactual(ds, fit.weights))


def test_cell_seed_is_stable():
    a = np.random.default_rng(cell_seed(1, 2, 3)).random()
    assert a == np.random.default_rng(cell_seed(1, 2, 3)).random()
    assert a != np.random.default_rng(cell_seed(1, 3, 2)).random()


def test_config_validation():
    for kw in ({"t_pre": 0}, {"inner_max_iter": 0}, {"outer_restarts": -1}, {"inner_tol": 0.0}):
        with pytest.raises(DomainError):
            SynthConfig(**kw)
