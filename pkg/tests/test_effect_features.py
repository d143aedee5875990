import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from incidentflow.effect_features import (
    FEATURE_NAMES,
    build_features,
    build_training_table,
    feature_matrix,
    save_table,
)
from incidentflow.exceptions import DomainError, EmptyTrainingSetError, UnreachableError
from incidentflow.network import StationGraph
from incidentflow.panel_io import CausalEffectEstimate, IncidentRecord

from conftest import make_panel

INC = IncidentRecord("I1", "L1", ("C", "D"), 0, 465.0, 525.0, max_delay=12.0, delay_5_num=3,
                     cancel_num=1, evacuate_num=2)


def test_toy_example(path_graph):
    fv = build_features(INC, path_graph, ("A", "F"), 0, 18, 40.0)
    assert fv.distance_o == 2 and fv.distance_d == 2
    assert fv.proportion == pytest.approx(2 / 6)
    assert fv.time_diff_to_start == 90 and fv.time_diff_to_end == 30
    assert fv.is_in_incident == 0
    assert (fv.duration, fv.max_delay, fv.delay_5_num, fv.cancel_num, fv.evacuate_num) == (60, 12, 3, 1, 2)
    assert fv.influence_station_num == 2
    assert fv.x0 == 40.0


def test_interval_inside_incident(path_graph):
    # interval 16 has midpoint 495
    fv = build_features(INC, path_graph, ("C", "E"), 0, 16, 0.0)
    assert fv.is_in_incident == 1
    assert fv.time_diff_to_start == 30 and fv.time_diff_to_end == -30
    assert fv.distance_o == 0 and fv.distance_d == 1


def test_boundary_midpoint_counts_as_inside(path_graph):
    inc = IncidentRecord("I", "L1", ("A",), 0, 450.0, 465.0)
    fv = build_features(inc, path_graph, ("A", "B"), 0, 15, 0.0)
    assert fv.time_diff_to_end == 0 and fv.is_in_incident == 1


def test_feature_order_and_passthrough(path_graph):
    arr = build_features(INC, path_graph, ("A", "F"), 0, 18, 123.25).to_array()
    assert arr.shape == (13,) and len(FEATURE_NAMES) == 13
    assert FEATURE_NAMES[-1] == "x0" and arr[-1] == 123.25
    assert FEATURE_NAMES[:3] == ("duration", "max_delay", "delay_5_num")


def test_far_od_has_zero_overlap(path_graph):
    fv = build_features(INC, path_graph, ("E", "F"), 0, 18, 0.0)
    assert fv.proportion == 0.0
    assert fv.distance_o == 1 and fv.distance_d == 2


def test_errors(path_graph):
    with pytest.raises(DomainError):
        build_features(INC, path_graph, ("A", "F"), 1, 18, 0.0)
    with pytest.raises(DomainError):
        build_features(INC, path_graph, ("A", "F"), 0, 48, 0.0, n_intervals=48)
    g = StationGraph.from_lines({"L1": list("ABCDEF"), "L2": ["X", "Y"]})
    with pytest.raises(UnreachableError):
        build_features(INC, g, ("X", "Y"), 0, 18, 0.0)


def _estimates(rng, n_od, day, intervals):
    out = []
    for od in range(n_od):
        for k in intervals:
            obs = float(rng.integers(0, 100))
            cf = float(rng.uniform(0, 100))
            out.append(CausalEffectEstimate(od, day, k, obs, cf, obs - cf, float(rng.choice(np.arange(20) / 20))))
    return out


def _setup():
    g = StationGraph.from_lines({"L1": list("ABCDEF"), "L2": ["X", "Y"]})
    pairs = (("A", "F"), ("B", "C"), ("X", "Y"), ("E", "F"))
    panel = make_panel(np.zeros((4, 2, 48), dtype=int), pairs=pairs)
    return g, panel


def test_training_table_counts():
    g, panel = _setup()
    rng = np.random.default_rng(0)
    est = _estimates(rng, 4, 0, range(15, 22))
    reachable = [e for e in est if e.od != 2]
    for p1 in (0.0, 0.05, 0.3, 1.0):
        want = sum(e.p_value <= p1 for e in reachable)
        if want == 0:
            with pytest.raises(EmptyTrainingSetError):
                build_training_table(est, [INC], g, panel, p1)
            continue
        eff, pv = build_training_table(est, [INC], g, panel, p1)
        assert len(eff.targets) == want
        assert len(pv.targets) == len(reachable)
        np.testing.assert_array_equal(pv.targets, [e.p_value for e in reachable])
    eff, _ = build_training_table(est, [INC], g, panel, 1.0)
    np.testing.assert_array_equal(eff.targets, [e.effect for e in reachable])
    np.testing.assert_array_equal(eff.features[:, -1], [e.counterfactual for e in reachable])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 1), st.floats(0, 1))
def test_training_rows_monotone_in_p1(seed, a, b):
    g, panel = _setup()
    est = _estimates(np.random.default_rng(seed), 4, 0, range(14, 20))
    lo, hi = sorted((a, b))

    def n_rows(p1):
        try:
            return len(build_training_table(est, [INC], g, panel, p1)[0].targets)
        except EmptyTrainingSetError:
            return 0

    assert n_rows(lo) <= n_rows(hi)


def test_p1_zero_with_no_zero_p_values():
    g, panel = _setup()
    est = [CausalEffectEstimate(0, 0, 18, 5.0, 3.0, 2.0, 0.1)]
    with pytest.raises(EmptyTrainingSetError):
        build_training_table(est, [INC], g, panel, 0.0)
    with pytest.raises(DomainError):
        build_training_table(est, [INC], g, panel, 1.5)
    nan = [CausalEffectEstimate(0, 0, 18, 5.0, 3.0, 2.0)]
    with pytest.raises(DomainError):
        build_training_table(nan, [INC], g, panel, 1.0)


def test_unreachable_cells_skipped_or_raised():
    g, panel = _setup()
    est = _estimates(np.random.default_rng(1), 4, 0, [18])
    X, kept = feature_matrix(est, [INC], g, panel)
    assert kept == [0, 1, 3] and X.shape == (3, 13)
    with pytest.raises(UnreachableError):
        feature_matrix(est, [INC], g, panel, skip_unreachable=False)


def test_incident_lookup_by_day_and_start():
    g, panel = _setup()
    early = IncidentRecord("E", "L1", ("A",), 1, 120.0, 150.0)
    late = IncidentRecord("L", "L1", ("F",), 1, 600.0, 630.0)
    est = [CausalEffectEstimate(1, 1, k, 1.0, 1.0, 0.0, 0.0) for k in (3, 19, 20, 30)]
    X, _ = feature_matrix(est, [INC, early, late], g, panel)
    # before any start the first incident applies; later cells use the latest started one
    np.testing.assert_array_equal(X[:, FEATURE_NAMES.index("time_diff_to_start")], [-15.0, 465.0, 15.0, 315.0])
    with pytest.raises(DomainError):
        feature_matrix([CausalEffectEstimate(0, 5, 1, 1.0, 1.0, 0.0, 0.0)], [INC], g, panel)


def test_x0_override_and_save(tmp_path):
    g, panel = _setup()
    est = _estimates(np.random.default_rng(2), 2, 0, [17, 18])
    X, _ = feature_matrix(est, [INC], g, panel, x0=np.arange(4.0))
    np.testing.assert_array_equal(X[:, -1], np.arange(4.0))
    eff, _ = build_training_table(est, [INC], g, panel, 1.0)
    save_table(eff, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0].split(",") == [*FEATURE_NAMES, "target"]
    assert len(lines) == 1 + len(eff.targets)
