"""Synthetic subway network, OD panel and incident generator.

Demand is multiplicative (base level x time-of-day profile x day modifiers x
OD popularity x a day-level shock) and incident effects are added on top as
integers, so the true effect of every cell is known exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, DomainError
from .network import StationGraph, shortest_hops
from .panel_io import (
    INTERVAL_MINUTES,
    DayMeta,
    IncidentRecord,
    ODPanel,
    _atomic_write_rows,
)

GROUND_TRUTH_HEADER = ("od_id", "day_index", "interval_index", "true_effect")


@dataclass(frozen=True)
class SimSpec:
    n_lines: int = 2
    stations_per_line: int = 6
    n_transfer: int = 1
    n_days: int = 40
    n_intervals: int = 24
    base_demand: float = 60.0
    weekend_factor: float = 0.6
    weather_factor: float = 0.85
    noise_sigma: float = 1.0
    day_sigma: float = 0.05
    sunny_prob: float = 0.7
    n_od: int | None = 30
    seed: int = 0

    def __post_init__(self):
        for name in ("n_lines", "stations_per_line", "n_days", "n_intervals"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_transfer < 0:
            raise ConfigError("n_transfer must be >= 0")
        for name in ("base_demand", "weekend_factor", "weather_factor"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.noise_sigma < 0 or self.day_sigma < 0:
            raise ConfigError("noise levels must be >= 0")
        if not 0.0 <= self.sunny_prob <= 1.0:
            raise ConfigError("sunny_prob must lie in [0, 1]")
        if self.n_od is not None and self.n_od < 1:
            raise ConfigError("n_od must be >= 1")


@dataclass(frozen=True)
class IncidentProfile:
    """Shape of an incident's effect on nearby OD flows.

    During the incident flows drop by ``suppression_depth`` of their level;
    afterwards they exceed it by ``recovery_overshoot`` decaying with time
    constant ``recovery_tau_min``. Both shrink by ``spatial_decay`` per hop
    between the OD and the affected stations, and ODs more than ``reach``
    hops away are untouched. Each OD in reach is affected with probability
    ``affect_prob``.
    """

    suppression_depth: float = 0.5
    recovery_overshoot: float = 0.3
    spatial_decay: float = 0.5
    reach: int = 2
    recovery_tau_min: float = 60.0
    recovery_window_min: float = 180.0
    affect_prob: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.suppression_depth <= 1.0:
            raise ConfigError("suppression_depth must lie in [0, 1]")
        if self.recovery_overshoot < 0:
            raise ConfigError("recovery_overshoot must be >= 0")
        if not 0.0 <= self.spatial_decay <= 1.0:
            raise ConfigError("spatial_decay must lie in [0, 1]")
        if self.reach < 0:
            raise ConfigError("reach must be >= 0")
        if not 0.0 <= self.affect_prob <= 1.0:
            raise ConfigError("affect_prob must lie in [0, 1]")


@dataclass(frozen=True)
class InjectedEffect:
    od: int
    day: int
    interval: int
    true_effect: float


@dataclass(frozen=True)
class Scenario:
    graph: StationGraph
    base_panel: ODPanel
    panel: ODPanel
    incidents: list[IncidentRecord]
    effects: list[InjectedEffect]
    affected_ods: dict = field(default_factory=dict)


def _rng(seed, *stream) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *stream]))


# ------------------------------------------------------------------ network


def generate_network(spec: SimSpec) -> StationGraph:
    """``n_lines`` path lines; consecutive lines share transfer stations.

    Transfers are spread round-robin over the pairs (line i, line i+1), each
    identifying a station of line i+1 with a station of line i.
    """
    n, m = spec.n_lines, spec.stations_per_line
    if n > 1 and spec.n_transfer < n - 1:
        raise ConfigError(f"{n} lines need at least {n - 1} transfers to be connected")
    if spec.n_transfer > (n - 1) * m:
        raise ConfigError(f"at most {(n - 1) * m} transfers fit {n} lines of {m} stations")
    rng = _rng(spec.seed, 1)
    lines = [[f"S{i}_{j}" for j in range(m)] for i in range(n)]
    used = [set() for _ in range(n)]
    for t in range(spec.n_transfer):
        b = t % (n - 1) + 1
        a = b - 1
        # a used position was either renamed already or exported to the next line
        free_b = [j for j in range(m) if j not in used[b]]
        if not free_b:
            raise ConfigError("no free station left for a transfer")
        pb = int(rng.choice(free_b))
        taken = {lines[b][j] for j in range(m)}
        free_a = [j for j in range(m) if lines[a][j] not in taken]
        if not free_a:
            raise ConfigError("no free station left for a transfer")
        pa = int(rng.choice(free_a))
        lines[b][pb] = lines[a][pa]
        used[b].add(pb)
        used[a].add(pa)
    return StationGraph.from_lines({f"L{i}": stations for i, stations in enumerate(lines)})


# -------------------------------------------------------------------- panel


def interval_profile(n_intervals: int) -> np.ndarray:
    """Relative demand per interval: night trough, a tall morning peak and an evening peak."""
    hours = (np.arange(n_intervals) + 0.5) * INTERVAL_MINUTES / 60.0
    base = 0.15 + 0.55 / (1.0 + np.exp(-(hours - 6.0) * 2.0)) * (1.0 / (1.0 + np.exp((hours - 22.5) * 2.0)))
    morning = 1.3 * np.exp(-0.5 * ((hours - 8.25) / 0.9) ** 2)
    evening = 0.9 * np.exp(-0.5 * ((hours - 18.0) / 1.1) ** 2)
    return base + morning + evening


def choose_od_pairs(graph: StationGraph, spec: SimSpec) -> tuple[tuple[str, str], ...]:
    stations = graph.stations
    pairs = [(o, d) for o in stations for d in stations if o != d]
    if spec.n_od is not None and spec.n_od < len(pairs):
        idx = _rng(spec.seed, 2).choice(len(pairs), size=spec.n_od, replace=False)
        pairs = [pairs[i] for i in sorted(idx)]
    return tuple(pairs)


def generate_day_meta(spec: SimSpec) -> tuple[DayMeta, ...]:
    rng = _rng(spec.seed, 3)
    start = date(2024, 1, 1)  # a Monday
    sunny = rng.random(spec.n_days) < spec.sunny_prob
    return tuple(
        DayMeta(d, (d % 7) >= 5, bool(sunny[d]), (start + timedelta(days=d)).isoformat())
        for d in range(spec.n_days)
    )


def expected_rates(spec: SimSpec, n_od: int, day_meta) -> np.ndarray:
    """Noise-free demand ``(n_od, n_days, n_intervals)`` before the day shock."""
    popularity = _rng(spec.seed, 4).lognormal(0.0, 0.5, size=n_od)
    day_mod = np.array(
        [(spec.weekend_factor if m.is_weekend else 1.0) * (1.0 if m.is_sunny else spec.weather_factor) for m in day_meta]
    )
    prof = interval_profile(spec.n_intervals)
    return spec.base_demand * popularity[:, None, None] * day_mod[None, :, None] * prof[None, None, :]


def generate_panel(graph: StationGraph, spec: SimSpec) -> ODPanel:
    """Integer flows: rounded latent rate plus Poisson-like noise, floored at 0.

    The cell noise has standard deviation ``noise_sigma * sqrt(rate)``; each
    (OD, day) also receives a lognormal level shock of scale ``day_sigma``.
    """
    pairs = choose_od_pairs(graph, spec)
    meta = generate_day_meta(spec)
    rate = expected_rates(spec, len(pairs), meta)
    rng = _rng(spec.seed, 5)
    shock = rng.lognormal(0.0, spec.day_sigma, size=rate.shape[:2]) if spec.day_sigma > 0 else np.ones(rate.shape[:2])
    latent = rate * shock[:, :, None]
    noise = rng.standard_normal(latent.shape)
    flows = np.rint(latent + spec.noise_sigma * np.sqrt(latent) * noise)
    return ODPanel(pairs, np.maximum(flows, 0).astype(np.int64), meta)


# ---------------------------------------------------------------- incidents


def od_distance(graph: StationGraph, od_pair, stations) -> int | None:
    """``min(distance_o, distance_d)`` to the affected stations, ``None`` if unreachable."""
    do = shortest_hops(graph, od_pair[0], stations)
    dd = shortest_hops(graph, od_pair[1], stations)
    reachable = [x for x in (do, dd) if x is not None]
    return min(reachable) if reachable else None


def inject_incident(
    panel: ODPanel,
    graph: StationGraph,
    incident: IncidentRecord,
    profile: IncidentProfile = IncidentProfile(),
    seed: int = 0,
) -> tuple[ODPanel, list[InjectedEffect]]:
    """Add the incident's integer effects to ``panel``.

    Effects scale with the cell's flow in ``panel``, are rounded to whole
    passengers and are floored so flows stay non-negative. The returned
    effects are the values before flooring; zero effects are not listed.
    """
    day = incident.day_index
    if not 0 <= day < panel.n_days:
        raise DomainError(f"incident day {day} outside panel")
    if incident.start_min < 0 or incident.start_interval >= panel.n_intervals:
        raise DomainError("incident starts outside the panel's intervals")
    for s in incident.affected_stations:
        if s not in graph:
            raise DomainError(f"affected station {s} not in network")
    rng = _rng(seed, 6)
    mids = (np.arange(panel.n_intervals) + 0.5) * INTERVAL_MINUTES
    during = (mids >= incident.start_min) & (mids <= incident.end_min)
    after = mids - incident.end_min
    recovering = (after > 0) & (after <= profile.recovery_window_min)
    shape = np.zeros(panel.n_intervals)
    shape[during] = -profile.suppression_depth
    shape[recovering] = profile.recovery_overshoot * np.exp(-after[recovering] / profile.recovery_tau_min)
    flows = panel.flows.astype(np.int64)
    effects = []
    for od, pair in enumerate(panel.od_pairs):
        dist = od_distance(graph, pair, incident.affected_stations)
        # draw the coin for every OD so affectedness of one OD never shifts another's
        coin = rng.random() < profile.affect_prob
        if dist is None or dist > profile.reach or not coin:
            continue
        scale = profile.spatial_decay ** dist
        delta = np.rint(scale * shape * flows[od, day]).astype(np.int64)
        for k in np.flatnonzero(delta):
            effects.append(InjectedEffect(od, day, int(k), float(delta[k])))
        flows[od, day] = np.maximum(flows[od, day] + delta, 0)
    return panel.with_flows(flows), effects


def random_incidents(
    graph: StationGraph,
    spec: SimSpec,
    n_incidents: int,
    seed: int | None = None,
    span: tuple[int, int] = (2, 3),
    start_window_min: tuple[float, float] = (390.0, 540.0),
    duration_min: tuple[float, float] = (30.0, 90.0),
) -> list[IncidentRecord]:
    """Incidents on distinct weekdays, each covering a run of stations on one line."""
    rng = _rng(spec.seed if seed is None else seed, 7)
    weekdays = [d for d in range(spec.n_days) if d % 7 < 5]
    if n_incidents > len(weekdays):
        raise ConfigError(f"only {len(weekdays)} weekdays for {n_incidents} incidents")
    days = sorted(int(d) for d in rng.choice(weekdays, size=n_incidents, replace=False))
    line_ids = sorted(graph.lines)
    out = []
    for i, day in enumerate(days):
        line_id = line_ids[int(rng.integers(len(line_ids)))]
        line = graph.lines[line_id]
        width = int(rng.integers(span[0], span[1] + 1))
        width = min(width, len(line))
        first = int(rng.integers(0, len(line) - width + 1))
        start = float(INTERVAL_MINUTES * math.floor(rng.uniform(*start_window_min) / INTERVAL_MINUTES))
        duration = float(rng.uniform(*duration_min))
        end = start + round(duration)
        max_delay = round(duration * rng.uniform(0.3, 0.8), 1)
        out.append(
            IncidentRecord(
                incident_id=f"I{i:03d}",
                line_id=line_id,
                affected_stations=tuple(line[first:first + width]),
                day_index=day,
                start_min=start,
                end_min=float(end),
                max_delay=max_delay,
                delay_5_num=int(rng.poisson(duration / 10.0)),
                cancel_num=int(rng.poisson(duration / 30.0)),
                evacuate_num=int(rng.poisson(width / 2.0)),
            )
        )
    return out


def severity(incident: IncidentRecord) -> float:
    """Depth multiplier in roughly [0.6, 1.4], growing with duration and delay."""
    return float(np.clip(0.4 + incident.duration / 90.0 + incident.max_delay / 150.0, 0.6, 1.4))


def build_scenario(
    spec: SimSpec,
    n_incidents: int = 8,
    profile: IncidentProfile = IncidentProfile(),
    scale_by_severity: bool = True,
) -> Scenario:
    """Network, clean panel, incidents and the injected panel for one seed."""
    graph = generate_network(spec)
    base = generate_panel(graph, spec)
    incidents = random_incidents(graph, spec, n_incidents)
    panel = base
    effects: list[InjectedEffect] = []
    affected = {}
    for i, inc in enumerate(incidents):
        prof = profile
        if scale_by_severity:
            s = severity(inc)
            prof = replace(
                profile,
                suppression_depth=min(1.0, profile.suppression_depth * s),
                recovery_overshoot=profile.recovery_overshoot * s,
            )
        panel, eff = inject_incident(panel, graph, inc, prof, seed=spec.seed * 1000 + i)
        effects.extend(eff)
        affected[inc.incident_id] = sorted({e.od for e in eff})
    return Scenario(graph, base, panel, incidents, effects, affected)


STANDARD_SPEC = SimSpec(base_demand=150.0)
STANDARD_PROFILE = IncidentProfile(recovery_overshoot=0.1)
STANDARD_N_INCIDENTS = 10


def standard_scenario(seed: int, profile: IncidentProfile | None = None, **spec_overrides) -> Scenario:
    """The reference experiment: 2 lines, 40 days, 30 ODs, 10 incidents on distinct weekdays."""
    spec = replace(STANDARD_SPEC, seed=seed, **spec_overrides)
    return build_scenario(spec, STANDARD_N_INCIDENTS, profile or STANDARD_PROFILE)


def save_ground_truth(effects, path) -> None:
    rows = (
        (e.od, e.day, e.interval, repr(float(e.true_effect)))
        for e in sorted(effects, key=lambda e: (e.od, e.day, e.interval))
    )
    _atomic_write_rows(Path(path), GROUND_TRUTH_HEADER, rows)
