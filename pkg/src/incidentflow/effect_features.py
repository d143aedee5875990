"""Per-cell features describing an incident's relation to an OD flow.

Each (incident, OD, interval) sample is described by 13 values in a fixed
order: incident severity, spatial relation of the OD to the affected
stations, timing of the interval relative to the incident, and the
counterfactual flow ``x0``.
"""

from __future__ import annotations

from dataclasses import astuple, dataclass
from pathlib import Path

import numpy as np

from .exceptions import DomainError, EmptyTrainingSetError, UnreachableError
from .learners import Dataset
from .network import StationGraph, overlap_proportion, shortest_hops
from .panel_io import INTERVAL_MINUTES, CausalEffectEstimate, IncidentRecord, ODPanel, _atomic_write_rows

FEATURE_NAMES = (
    "duration",
    "max_delay",
    "delay_5_num",
    "evacuate_num",
    "cancel_num",
    "influence_station_num",
    "distance_d",
    "distance_o",
    "proportion",
    "time_diff_to_start",
    "time_diff_to_end",
    "is_in_incident",
    "x0",
)


@dataclass(frozen=True)
class EffectFeatureVector:
    duration: float
    max_delay: float
    delay_5_num: float
    evacuate_num: float
    cancel_num: float
    influence_station_num: float
    distance_d: float
    distance_o: float
    proportion: float
    time_diff_to_start: float
    time_diff_to_end: float
    is_in_incident: float
    x0: float

    def to_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)


def interval_midpoint(interval: int) -> float:
    return (interval + 0.5) * INTERVAL_MINUTES


class _SpatialCache:
    # hop distances and overlap depend only on (incident stations, OD), not on interval
    def __init__(self, graph: StationGraph):
        self.graph = graph
        self._memo = {}

    def __call__(self, incident: IncidentRecord, od_pair):
        key = (incident.affected_stations, tuple(od_pair))
        if key not in self._memo:
            self._memo[key] = _spatial(self.graph, incident, od_pair)
        return self._memo[key]


def _spatial(graph, incident, od_pair):
    origin, dest = od_pair
    stations = incident.affected_stations
    do = shortest_hops(graph, origin, stations)
    dd = shortest_hops(graph, dest, stations)
    if do is None or dd is None:
        raise UnreachableError(f"OD ({origin}, {dest}) cannot reach incident {incident.incident_id}")
    prop = overlap_proportion(graph, origin, dest, stations)
    if prop is None:
        raise UnreachableError(f"no path from {origin} to {dest}")
    return float(do), float(dd), float(prop)


def build_features(
    incident: IncidentRecord,
    graph: StationGraph,
    od_pair,
    day: int,
    interval: int,
    x0: float,
    n_intervals: int | None = None,
    _spatial_fn=None,
) -> EffectFeatureVector:
    """Feature vector of one cell; time differences are signed minutes from the interval midpoint."""
    if interval < 0 or (n_intervals is not None and interval >= n_intervals):
        raise DomainError(f"interval {interval} outside the day")
    if day != incident.day_index:
        raise DomainError(f"day {day} is not the incident's day {incident.day_index}")
    do, dd, prop = (_spatial_fn or (lambda inc, od: _spatial(graph, inc, od)))(incident, od_pair)
    mid = interval_midpoint(interval)
    return EffectFeatureVector(
        duration=float(incident.duration),
        max_delay=float(incident.max_delay),
        delay_5_num=float(incident.delay_5_num),
        evacuate_num=float(incident.evacuate_num),
        cancel_num=float(incident.cancel_num),
        influence_station_num=float(incident.influence_station_num),
        distance_d=dd,
        distance_o=do,
        proportion=prop,
        time_diff_to_start=mid - incident.start_min,
        time_diff_to_end=mid - incident.end_min,
        is_in_incident=float(incident.start_min <= mid <= incident.end_min),
        x0=float(x0),
    )


def _incident_for(incidents, day: int, interval: int) -> IncidentRecord:
    # the latest incident on that day that started at or before the interval,
    # else the first one still to come
    same_day = [inc for inc in incidents if inc.day_index == day]
    if not same_day:
        raise DomainError(f"no incident on day {day}")
    started = [inc for inc in same_day if inc.start_interval <= interval]
    if started:
        return max(started, key=lambda inc: (inc.start_min, inc.incident_id))
    return min(same_day, key=lambda inc: (inc.start_min, inc.incident_id))


def feature_matrix(
    estimates,
    incidents,
    graph: StationGraph,
    panel: ODPanel,
    x0=None,
    skip_unreachable: bool = True,
):
    """Feature rows for ``estimates``; returns ``(X, kept_indices)``.

    ``x0`` overrides the counterfactual column (one value per estimate);
    cells whose OD cannot reach the incident are skipped.
    """
    spatial = _SpatialCache(graph)
    rows, kept = [], []
    for i, e in enumerate(estimates):
        inc = _incident_for(incidents, e.day, e.interval)
        value = e.counterfactual if x0 is None else x0[i]
        try:
            fv = build_features(inc, graph, panel.od_pairs[e.od], e.day, e.interval, value,
                                panel.n_intervals, spatial)
        except UnreachableError:
            if skip_unreachable:
                continue
            raise
        rows.append(fv.to_array())
        kept.append(i)
    X = np.array(rows, dtype=float).reshape(len(rows), len(FEATURE_NAMES))
    return X, kept


def build_training_table(
    estimates: list[CausalEffectEstimate],
    incidents: list[IncidentRecord],
    graph: StationGraph,
    panel: ODPanel,
    p1: float,
) -> tuple[Dataset, Dataset]:
    """Effect-regression rows (p-value <= p1) and p-value-regression rows (all).

    The effect table's target is the estimated effect; the p-value table's
    target is the placebo p-value. ``x0`` is the synthetic counterfactual.
    """
    if not 0.0 <= p1 <= 1.0:
        raise DomainError("p1 must lie in [0, 1]")
    X, kept = feature_matrix(estimates, incidents, graph, panel)
    if not kept:
        raise EmptyTrainingSetError("no estimates with reachable ODs")
    est = [estimates[i] for i in kept]
    p = np.array([e.p_value for e in est])
    if np.any(np.isnan(p)):
        raise DomainError("every estimate needs a p-value")
    effect = np.array([e.effect for e in est])
    mask = p <= p1
    if not mask.any():
        raise EmptyTrainingSetError(f"no estimate has p-value <= {p1}")
    return Dataset(X[mask], effect[mask], FEATURE_NAMES), Dataset(X, p, FEATURE_NAMES)


def save_table(dataset: Dataset, path) -> None:
    rows = ([repr(float(v)) for v in row] + [repr(float(t))] for row, t in zip(dataset.features, dataset.targets))
    _atomic_write_rows(Path(path), (*dataset.feature_names, "target"), rows)
