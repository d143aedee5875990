from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from incidentflow.exceptions import ConfigError, DomainError
from incidentflow.panel_io import IncidentRecord
from incidentflow.simgen import (
    GROUND_TRUTH_HEADER,
    IncidentProfile,
    SimSpec,
    build_scenario,
    generate_network,
    generate_panel,
    inject_incident,
    interval_profile,
    od_distance,
    random_incidents,
    save_ground_truth,
    standard_scenario,
)


def bfs_dist(graph, source):
    dist = {source: 0}
    queue = deque([source])
    while queue:
        s = queue.popleft()
        for t in graph.neighbors(s):
            if t not in dist:
                dist[t] = dist[s] + 1
                queue.append(t)
    return dist


def test_single_line_is_a_path():
    g = generate_network(SimSpec(n_lines=1, stations_per_line=5, n_transfer=0))
    assert len(g.stations) == 5
    diam = max(max(bfs_dist(g, s).values()) for s in g.stations)
    assert diam == 4
    assert sorted(len(g.neighbors(s)) for s in g.stations) == [1, 1, 2, 2, 2]


@pytest.mark.parametrize("n_lines, n_transfer", [(2, 1), (3, 2), (4, 5)])
def test_networks_are_connected(n_lines, n_transfer):
    g = generate_network(SimSpec(n_lines=n_lines, stations_per_line=6, n_transfer=n_transfer))
    first = g.stations[0]
    assert set(bfs_dist(g, first)) == set(g.stations)
    assert len(g.stations) == n_lines * 6 - n_transfer


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 5), st.integers(2, 7), st.data(), st.integers(0, 1000))
def test_every_feasible_network_is_connected(n_lines, m, data, seed):
    n_transfer = data.draw(st.integers(n_lines - 1, (n_lines - 1) * m))
    try:
        g = generate_network(SimSpec(n_lines=n_lines, stations_per_line=m, n_transfer=n_transfer, seed=seed))
    except ConfigError:
        return
    assert set(bfs_dist(g, g.stations[0])) == set(g.stations)


def test_infeasible_topologies():
    with pytest.raises(ConfigError):
        generate_network(SimSpec(n_lines=3, n_transfer=1))
    with pytest.raises(ConfigError):
        generate_network(SimSpec(n_lines=2, stations_per_line=3, n_transfer=4))
    for kw in ({"n_days": 0}, {"base_demand": 0.0}, {"weekend_factor": -1.0}, {"sunny_prob": 2.0}, {"n_od": 0}):
        with pytest.raises(ConfigError):
            SimSpec(**kw)
    with pytest.raises(ConfigError):
        IncidentProfile(suppression_depth=1.5)


def test_noise_free_identical_days():
    spec = SimSpec(noise_sigma=0.0, day_sigma=0.0, n_days=14, n_od=6, seed=2)
    panel = generate_panel(generate_network(spec), spec)
    flags = panel.day_flags()
    for a in range(panel.n_days):
        for b in range(a + 1, panel.n_days):
            if np.array_equal(flags[a], flags[b]):
                np.testing.assert_array_equal(panel.flows[:, a], panel.flows[:, b])


def test_weekend_ratio():
    spec = SimSpec(n_days=28, n_od=30, sunny_prob=1.0, seed=4)
    panel = generate_panel(generate_network(spec), spec)
    weekend = np.array([m.is_weekend for m in panel.day_meta])
    ratio = panel.flows[:, weekend].mean() / panel.flows[:, ~weekend].mean()
    assert panel.flows[:, weekend].size >= 1000
    assert abs(ratio / spec.weekend_factor - 1) < 0.05


def test_flows_are_nonnegative_integers():
    spec = SimSpec(base_demand=2.0, noise_sigma=3.0, seed=5)
    panel = generate_panel(generate_network(spec), spec)
    assert np.issubdtype(panel.flows.dtype, np.integer)
    assert panel.flows.min() >= 0
    assert (panel.flows == 0).any()


def test_morning_peak():
    prof = interval_profile(48)
    assert np.argmax(prof) in (15, 16, 17)  # 07:30 to 09:00


def _base(seed=0):
    spec = SimSpec(seed=seed, n_od=None, n_days=10, base_demand=80.0)
    g = generate_network(spec)
    return g, generate_panel(g, spec)


def test_identity_profile():
    g, panel = _base()
    inc = IncidentRecord("I", "L0", (g.lines["L0"][2],), 3, 420.0, 480.0)
    out, eff = inject_incident(panel, g, inc, IncidentProfile(suppression_depth=0.0, recovery_overshoot=0.0))
    np.testing.assert_array_equal(out.flows, panel.flows)
    assert eff == []


def test_cell_difference_and_reach():
    g, panel = _base(1)
    inc = IncidentRecord("I", "L0", tuple(g.lines["L0"][1:3]), 4, 390.0, 450.0)
    prof = IncidentProfile(reach=1)
    out, eff = inject_incident(panel, g, inc, prof, seed=3)
    assert eff
    diff = out.flows.astype(np.int64) - panel.flows
    recorded = np.zeros_like(diff)
    for e in eff:
        assert e.day == 4
        recorded[e.od, e.day, e.interval] += int(e.true_effect)
    # flooring only ever raises a cell above base + effect
    unfloored = out.flows > 0
    np.testing.assert_array_equal(diff[unfloored], recorded[unfloored])
    assert np.all(diff[~unfloored] >= recorded[~unfloored])
    for od, pair in enumerate(panel.od_pairs):
        dist = od_distance(g, pair, inc.affected_stations)
        if dist is None or dist > 1:
            np.testing.assert_array_equal(out.flows[od], panel.flows[od])
    # reversibility on cells that were not floored
    back = out.flows - recorded
    np.testing.assert_array_equal(back[unfloored], panel.flows[unfloored])


def test_effect_shape_signs():
    g, panel = _base(2)
    inc = IncidentRecord("I", "L1", (g.lines["L1"][3],), 2, 420.0, 480.0)
    _, eff = inject_incident(panel, g, inc, IncidentProfile(), seed=0)
    mids = {e.interval: (e.interval + 0.5) * 30 for e in eff}
    for e in eff:
        if inc.start_min <= mids[e.interval] <= inc.end_min:
            assert e.true_effect <= 0
        else:
            assert mids[e.interval] > inc.end_min and e.true_effect >= 0


def test_incident_outside_panel():
    g, panel = _base()
    with pytest.raises(DomainError):
        inject_incident(panel, g, IncidentRecord("I", "L0", (g.stations[0],), 99, 60.0, 90.0))
    with pytest.raises(DomainError):
        inject_incident(panel, g, IncidentRecord("I", "L0", (g.stations[0],), 1, 2000.0, 2100.0))
    with pytest.raises(DomainError):
        inject_incident(panel, g, IncidentRecord("I", "L0", ("nowhere",), 1, 60.0, 90.0))


def test_equal_seeds_are_bitwise_identical():
    a = build_scenario(SimSpec(seed=8, n_days=21), n_incidents=3)
    b = build_scenario(SimSpec(seed=8, n_days=21), n_incidents=3)
    assert a.panel.flows.tobytes() == b.panel.flows.tobytes()
    assert a.incidents == b.incidents and a.effects == b.effects
    c = build_scenario(SimSpec(seed=9, n_days=21), n_incidents=3)
    assert a.panel.flows.tobytes() != c.panel.flows.tobytes()


def test_random_incidents_on_distinct_weekdays():
    spec = SimSpec(n_days=21, seed=3)
    incs = random_incidents(generate_network(spec), spec, 8)
    days = [i.day_index for i in incs]
    assert len(set(days)) == 8 and all(d % 7 < 5 for d in days)
    with pytest.raises(ConfigError):
        random_incidents(generate_network(spec), spec, 16)


def test_standard_scenario_shape():
    sc = standard_scenario(0)
    assert sc.panel.flows.shape == (30, 40, 24)
    assert len(sc.incidents) == 10
    assert sc.effects


def test_ground_truth_file(tmp_path):
    sc = build_scenario(SimSpec(seed=1, n_days=14, n_od=8), n_incidents=2)
    save_ground_truth(sc.effects, tmp_path / "gt.csv")
    lines = (tmp_path / "gt.csv").read_text().splitlines()
    assert lines[0] == ",".join(GROUND_TRUTH_HEADER)
    assert len(lines) == 1 + len(sc.effects)
