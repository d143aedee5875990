"""Leave-one-out placebo test for synthetic-control effects.

Every unit (the treated day plus each incident-free day) is reconstructed
from the remaining incident-free days. The treated day's reconstruction error
is ranked among all units' errors and turned into a p-value.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .exceptions import DomainError, InsufficientDonorsError, InsufficientHistoryError
from .panel_io import CausalEffectEstimate, IncidentRecord, ODPanel
from .syncontrol import (
    SynthConfig,
    build_donor_set,
    cell_seed,
    clean_days,
    fit_donors,
    fit_with_v,
    reference_interval,
)


@dataclass(frozen=True)
class PlaceboConfig:
    alpha: float = 0.05
    post_incident_window_min: float = 180.0
    reuse_treated_v: bool = False

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise DomainError("alpha must lie in (0, 1)")
        if self.post_incident_window_min < 0:
            raise DomainError("post_incident_window_min must be >= 0")


@dataclass(frozen=True)
class PlaceboResult:
    days: np.ndarray
    errors: np.ndarray
    treated_day: int
    order_of_treated: int
    p_value: float


def _tie_tolerance(errors: np.ndarray) -> float:
    return 1e-9 * max(1.0, float(np.max(np.abs(errors))))


def rank_order(errors, treated_index: int) -> int:
    """1-based ascending rank of ``errors[treated_index]``; ties take the lowest rank."""
    e = np.asarray(errors, dtype=float)
    if not 0 <= treated_index < e.size:
        raise IndexError(f"treated index {treated_index} out of range for {e.size} errors")
    return 1 + int(np.count_nonzero(e < e[treated_index] - _tie_tolerance(e)))


def rank_p_value(errors, treated_index: int) -> float:
    """``1 - order(e_treated) / n``."""
    e = np.asarray(errors, dtype=float)
    if e.size < 2:
        raise DomainError("at least two errors are required")
    return 1.0 - rank_order(e, treated_index) / e.size


def placebo_units(panel: ODPanel, incidents, treated_day: int) -> list[int]:
    return sorted(set(clean_days(panel, incidents)) | {treated_day})


def placebo_errors(
    panel: ODPanel,
    incidents: list[IncidentRecord],
    od: int,
    treated_day: int,
    intervals,
    synth: SynthConfig = SynthConfig(),
    reuse_treated_v: bool = False,
):
    """Leave-one-out errors for a batch of intervals sharing one reference interval.

    Returns ``(days, errors, counterfactuals)`` with ``errors`` shaped
    ``(n_units, len(intervals))`` and ``counterfactuals`` the treated day's
    synthetic flows.
    """
    intervals = list(intervals)
    refs = {reference_interval(incidents, treated_day, k, synth.anchor_pre_period) for k in intervals}
    if len(refs) != 1:
        raise DomainError("intervals do not share a reference interval")
    ref = refs.pop()
    if panel.n_days < 3:
        raise InsufficientDonorsError("placebo test needs at least three days")
    pool = clean_days(panel, incidents)
    units = sorted(set(pool) | {treated_day})
    flows = panel.flows[od].astype(float)
    errors = np.empty((len(units), len(intervals)))
    treated_cf = None
    treated_v = None
    order = [treated_day] + [u for u in units if u != treated_day]
    for unit in order:
        donor_days = [d for d in pool if d != unit and d != treated_day]
        if not donor_days:
            raise InsufficientDonorsError(f"no donors left when day {unit} is held out")
        donors = build_donor_set(panel, od, unit, donor_days, ref, intervals, synth.t_pre)
        if reuse_treated_v and treated_v is not None:
            prepared = donors.standardized() if synth.standardize else donors
            fit = fit_with_v(prepared, treated_v, max_iter=synth.inner_max_iter, tol=synth.inner_tol)
        else:
            fit = fit_donors(donors, synth, cell_seed(synth.seed, od, treated_day, ref, unit))
        cf = np.asarray(fit.counterfactual, dtype=float)
        errors[units.index(unit)] = np.abs(cf - flows[unit, intervals])
        if unit == treated_day:
            treated_cf = cf
            treated_v = fit.v_diag
    return np.asarray(units), errors, treated_cf


def leave_one_out_errors(
    panel: ODPanel,
    incidents: list[IncidentRecord],
    od: int,
    interval: int,
    treated_day: int,
    synth: SynthConfig = SynthConfig(),
    reuse_treated_v: bool = False,
) -> PlaceboResult:
    """Placebo errors of one cell, one per unit day, with the treated day's rank."""
    if interval < max(2, synth.t_pre):
        raise InsufficientHistoryError(f"interval {interval} lacks history")
    days, errors, _ = placebo_errors(panel, incidents, od, treated_day, [interval], synth, reuse_treated_v)
    e = errors[:, 0]
    idx = int(np.searchsorted(days, treated_day))
    order = rank_order(e, idx)
    return PlaceboResult(days, e, treated_day, order, 1.0 - order / e.size)


def _od_task(panel, incidents, incident, od, intervals, synth, reuse):
    days, errors, cf = placebo_errors(panel, incidents, od, incident.day_index, intervals, synth, reuse)
    idx = int(np.searchsorted(days, incident.day_index))
    out = []
    for j, k in enumerate(intervals):
        observed = float(panel.flows[od, incident.day_index, k])
        out.append(
            CausalEffectEstimate(
                od=od, day=incident.day_index, interval=k, observed=observed,
                counterfactual=float(cf[j]), effect=observed - float(cf[j]),
                p_value=rank_p_value(errors[:, j], idx),
            )
        )
    return out


def test_effects(
    panel: ODPanel,
    incidents: list[IncidentRecord],
    incident: IncidentRecord,
    ods=None,
    intervals=None,
    synth: SynthConfig = SynthConfig(),
    placebo: PlaceboConfig = PlaceboConfig(),
    threads: int = 1,
) -> list[CausalEffectEstimate]:
    """Effects with placebo p-values for every (OD, interval) in the incident window.

    The window runs from the incident's start interval until
    ``post_incident_window_min`` after it ends. Results are ordered by
    ``(od, interval)`` regardless of ``threads``.
    """
    if ods is None:
        ods = range(panel.n_od)
    if intervals is None:
        intervals = incident.window_intervals(panel.n_intervals, placebo.post_incident_window_min)
    intervals = list(intervals)
    # group by reference interval so cells sharing matching inputs share fits
    groups: dict[int, list[int]] = {}
    for k in intervals:
        groups.setdefault(reference_interval(incidents, incident.day_index, k, synth.anchor_pre_period), []).append(k)
    tasks = [(od, ks) for od in ods for ks in groups.values()]

    def run(task):
        od, ks = task
        return _od_task(panel, incidents, incident, od, ks, synth, placebo.reuse_treated_v)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(run, tasks))
    else:
        chunks = [run(t) for t in tasks]
    out = [e for chunk in chunks for e in chunk]
    return sorted(out, key=lambda e: (e.od, e.interval))


def estimate_all(
    panel: ODPanel,
    incidents: list[IncidentRecord],
    ods=None,
    synth: SynthConfig = SynthConfig(),
    placebo: PlaceboConfig = PlaceboConfig(),
    threads: int = 1,
) -> list[CausalEffectEstimate]:
    """:func:`test_effects` for every incident, concatenated in incident order."""
    out = []
    for inc in incidents:
        out.extend(test_effects(panel, incidents, inc, ods, None, synth, placebo, threads))
    return out


def significant_fraction(estimates, alpha: float) -> float:
    if not estimates:
        return math.nan
    return sum(e.p_value <= alpha for e in estimates) / len(estimates)


test_effects.__test__ = False
