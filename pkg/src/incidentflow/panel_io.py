"""Panel data model and CSV ingestion.

Flows are stored long-format on disk (one row per ``(od, day, interval)``
cell) and as a dense ``(n_od, n_days, n_intervals)`` integer array in memory.
OD ids and day indices are contiguous integers starting at 0, so an OD's id
is also its position in :attr:`ODPanel.od_pairs`.
"""

from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import (
    DomainError,
    DuplicateCellError,
    InsufficientHistoryError,
    ParseError,
)

INTERVAL_MINUTES = 30

FLOWS_HEADER = ("od_id", "origin", "destination", "day_index", "interval_index", "count")
META_HEADER = ("day_index", "date", "is_weekend", "is_sunny")
INCIDENTS_HEADER = (
    "incident_id", "line_id", "affected_stations", "day_index", "start_min",
    "end_min", "max_delay", "delay_5_num", "cancel_num", "evacuate_num",
)
EFFECTS_HEADER = (
    "od_id", "day_index", "interval_index", "observed", "counterfactual",
    "effect", "p_value",
)
COVARIATE_SCHEMA = ("is_sunny", "is_weekend", "lag1_flow", "lag2_flow")


@dataclass(frozen=True)
class DayMeta:
    day_index: int
    is_weekend: bool
    is_sunny: bool
    date_label: str


@dataclass(frozen=True)
class IncidentRecord:
    incident_id: str
    line_id: str
    affected_stations: tuple[str, ...]
    day_index: int
    start_min: float
    end_min: float
    max_delay: float = 0.0
    delay_5_num: int = 0
    cancel_num: int = 0
    evacuate_num: int = 0

    def __post_init__(self):
        object.__setattr__(self, "affected_stations", tuple(self.affected_stations))
        if not self.end_min > self.start_min:
            raise DomainError(f"incident {self.incident_id}: end_min must exceed start_min")
        if not self.affected_stations:
            raise DomainError(f"incident {self.incident_id}: no affected stations")
        for name in ("max_delay", "delay_5_num", "cancel_num", "evacuate_num"):
            if getattr(self, name) < 0:
                raise DomainError(f"incident {self.incident_id}: {name} must be >= 0")

    @property
    def influence_station_num(self) -> int:
        return len(self.affected_stations)

    @property
    def duration(self) -> float:
        return self.end_min - self.start_min

    @property
    def start_interval(self) -> int:
        """Index of the interval containing the incident start."""
        return int(self.start_min // INTERVAL_MINUTES)

    def window_intervals(self, n_intervals: int, post_window_min: float = 180.0) -> list[int]:
        """Intervals from the incident start until ``post_window_min`` after its end."""
        last = int(math.ceil((self.end_min + post_window_min) / INTERVAL_MINUTES)) - 1
        return list(range(self.start_interval, min(last, n_intervals - 1) + 1))


@dataclass(frozen=True)
class CovariateVector:
    values: np.ndarray
    schema: tuple[str, ...] = COVARIATE_SCHEMA


@dataclass(frozen=True)
class CausalEffectEstimate:
    od: int
    day: int
    interval: int
    observed: float
    counterfactual: float
    effect: float
    p_value: float = math.nan

    def significant(self, alpha: float) -> bool:
        return self.p_value <= alpha


@dataclass(frozen=True, eq=False)
class ODPanel:
    """Dense OD flow panel with day-level covariates.

    ``flows[od, day, interval]`` is the passenger count of one 30-minute
    interval. Arrays are made read-only on construction.
    """

    od_pairs: tuple[tuple[str, str], ...]
    flows: np.ndarray
    day_meta: tuple[DayMeta, ...]
    _od_lookup: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        flows = np.array(self.flows, dtype=np.int64, copy=True)
        od_pairs = tuple((str(o), str(d)) for o, d in self.od_pairs)
        day_meta = tuple(self.day_meta)
        if flows.ndim != 3 or flows.shape[:2] != (len(od_pairs), len(day_meta)):
            raise DomainError(
                f"flows shape {flows.shape} does not match "
                f"{len(od_pairs)} ODs x {len(day_meta)} days"
            )
        if (flows < 0).any():
            raise DomainError("flows must be non-negative")
        if [m.day_index for m in day_meta] != list(range(len(day_meta))):
            raise DomainError("day_meta must be ordered with contiguous day_index from 0")
        flows.setflags(write=False)
        object.__setattr__(self, "flows", flows)
        object.__setattr__(self, "od_pairs", od_pairs)
        object.__setattr__(self, "day_meta", day_meta)
        object.__setattr__(self, "_od_lookup", {p: i for i, p in enumerate(od_pairs)})

    @property
    def n_od(self) -> int:
        return self.flows.shape[0]

    @property
    def n_days(self) -> int:
        return self.flows.shape[1]

    @property
    def n_intervals(self) -> int:
        return self.flows.shape[2]

    def od_index(self, origin: str, destination: str) -> int:
        return self._od_lookup[(origin, destination)]

    def day_flags(self) -> np.ndarray:
        """``(n_days, 2)`` array of ``(is_sunny, is_weekend)`` as floats."""
        return np.array([[m.is_sunny, m.is_weekend] for m in self.day_meta], dtype=float)

    def with_flows(self, flows: np.ndarray) -> "ODPanel":
        return ODPanel(self.od_pairs, flows, self.day_meta)

    def __eq__(self, other):
        if not isinstance(other, ODPanel):
            return NotImplemented
        return (
            self.od_pairs == other.od_pairs
            and self.day_meta == other.day_meta
            and np.array_equal(self.flows, other.flows)
        )

    __hash__ = None


def incident_days(incidents: Iterable[IncidentRecord]) -> set[int]:
    return {inc.day_index for inc in incidents}


def covariates_at(panel: ODPanel, od: int, day: int, interval: int) -> CovariateVector:
    """Day flags plus the two preceding flows of ``od`` on ``day``."""
    if interval < 2:
        raise InsufficientHistoryError(f"interval {interval} has fewer than two lags")
    if interval >= panel.n_intervals:
        raise IndexError(f"interval {interval} out of range")
    meta = panel.day_meta[day]
    row = panel.flows[od, day]
    values = np.array(
        [float(meta.is_sunny), float(meta.is_weekend), float(row[interval - 1]), float(row[interval - 2])]
    )
    return CovariateVector(values)


# --------------------------------------------------------------------- I/O


def _atomic_write_rows(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def atomic_write_text(path, text: str) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        # mkstemp creates 0600; give the result ordinary file permissions
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_rows(path, header: Sequence[str]):
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise ParseError(path, 1, "missing header") from None
        if tuple(first) != tuple(header):
            raise ParseError(path, 1, f"expected header {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(path, lineno, f"expected {len(header)} fields, got {len(row)}")
            yield lineno, row


def _parse_int(path, lineno, text, name):
    try:
        return int(text)
    except ValueError:
        raise ParseError(path, lineno, f"{name}: not an integer: {text!r}") from None


def _parse_float(path, lineno, text, name):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(path, lineno, f"{name}: not a number: {text!r}") from None
    if not math.isfinite(value) and name != "p_value":
        raise ParseError(path, lineno, f"{name}: not finite")
    return value


def _parse_bool(path, lineno, text, name):
    if text not in ("0", "1"):
        raise ParseError(path, lineno, f"{name}: expected 0 or 1, got {text!r}")
    return text == "1"


def load_meta(meta_path) -> tuple[DayMeta, ...]:
    days = {}
    for lineno, row in _read_rows(meta_path, META_HEADER):
        day = _parse_int(meta_path, lineno, row[0], "day_index")
        try:
            date.fromisoformat(row[1])
        except ValueError:
            raise ParseError(meta_path, lineno, f"date: not ISO-8601: {row[1]!r}") from None
        if day in days:
            raise DuplicateCellError(meta_path, lineno, f"duplicate day_index {day}")
        days[day] = DayMeta(
            day,
            _parse_bool(meta_path, lineno, row[2], "is_weekend"),
            _parse_bool(meta_path, lineno, row[3], "is_sunny"),
            row[1],
        )
    if sorted(days) != list(range(len(days))):
        raise DomainError(f"{meta_path}: day_index values must be contiguous from 0")
    return tuple(days[d] for d in range(len(days)))


def load_panel(flows_path, meta_path) -> ODPanel:
    """Read a flows CSV and a day-meta CSV into a validated :class:`ODPanel`."""
    day_meta = load_meta(meta_path)
    cells: dict[tuple[int, int, int], int] = {}
    pairs: dict[int, tuple[str, str]] = {}
    for lineno, row in _read_rows(flows_path, FLOWS_HEADER):
        od = _parse_int(flows_path, lineno, row[0], "od_id")
        day = _parse_int(flows_path, lineno, row[3], "day_index")
        interval = _parse_int(flows_path, lineno, row[4], "interval_index")
        count = _parse_int(flows_path, lineno, row[5], "count")
        if count < 0:
            raise DomainError(f"{flows_path}:{lineno}: negative count {count}")
        if od < 0 or day < 0 or interval < 0:
            raise ParseError(flows_path, lineno, "negative index")
        pair = (row[1], row[2])
        if pairs.setdefault(od, pair) != pair:
            raise ParseError(flows_path, lineno, f"od_id {od} has inconsistent stations")
        key = (od, day, interval)
        if key in cells:
            raise DuplicateCellError(flows_path, lineno, f"duplicate cell {key}")
        cells[key] = count
    if not cells:
        raise DomainError(f"{flows_path}: no flow rows")
    n_od = max(pairs) + 1
    if sorted(pairs) != list(range(n_od)):
        raise DomainError(f"{flows_path}: od_id values must be contiguous from 0")
    n_days = len(day_meta)
    n_intervals = max(k[2] for k in cells) + 1
    if max(k[1] for k in cells) >= n_days:
        raise DomainError(f"{flows_path}: day_index beyond meta file")
    if len(cells) != n_od * n_days * n_intervals:
        raise DomainError(
            f"{flows_path}: incomplete panel, {len(cells)} of "
            f"{n_od * n_days * n_intervals} cells present"
        )
    flows = np.empty((n_od, n_days, n_intervals), dtype=np.int64)
    for (od, day, interval), count in cells.items():
        flows[od, day, interval] = count
    return ODPanel(tuple(pairs[i] for i in range(n_od)), flows, day_meta)


def save_panel(panel: ODPanel, flows_path, meta_path) -> None:
    def flow_rows():
        for od, (origin, dest) in enumerate(panel.od_pairs):
            for day in range(panel.n_days):
                for interval in range(panel.n_intervals):
                    yield od, origin, dest, day, interval, int(panel.flows[od, day, interval])

    _atomic_write_rows(flows_path, FLOWS_HEADER, flow_rows())
    _atomic_write_rows(
        meta_path,
        META_HEADER,
        ((m.day_index, m.date_label, int(m.is_weekend), int(m.is_sunny)) for m in panel.day_meta),
    )


def load_incidents(path) -> list[IncidentRecord]:
    out = []
    for lineno, row in _read_rows(path, INCIDENTS_HEADER):
        try:
            out.append(
                IncidentRecord(
                    incident_id=row[0],
                    line_id=row[1],
                    affected_stations=tuple(s for s in row[2].split("|") if s),
                    day_index=_parse_int(path, lineno, row[3], "day_index"),
                    start_min=_parse_float(path, lineno, row[4], "start_min"),
                    end_min=_parse_float(path, lineno, row[5], "end_min"),
                    max_delay=_parse_float(path, lineno, row[6], "max_delay"),
                    delay_5_num=_parse_int(path, lineno, row[7], "delay_5_num"),
                    cancel_num=_parse_int(path, lineno, row[8], "cancel_num"),
                    evacuate_num=_parse_int(path, lineno, row[9], "evacuate_num"),
                )
            )
        except DomainError as exc:
            raise ParseError(path, lineno, str(exc)) from None
    ids = [inc.incident_id for inc in out]
    if len(set(ids)) != len(ids):
        raise DomainError(f"{path}: duplicate incident_id")
    return sorted(out, key=lambda inc: (inc.day_index, inc.start_min, inc.incident_id))


def save_incidents(incidents: Iterable[IncidentRecord], path) -> None:
    rows = (
        (
            inc.incident_id, inc.line_id, "|".join(inc.affected_stations), inc.day_index,
            repr(float(inc.start_min)), repr(float(inc.end_min)), repr(float(inc.max_delay)),
            inc.delay_5_num, inc.cancel_num, inc.evacuate_num,
        )
        for inc in sorted(incidents, key=lambda i: (i.day_index, i.start_min, i.incident_id))
    )
    _atomic_write_rows(path, INCIDENTS_HEADER, rows)


def save_effects(estimates: Iterable[CausalEffectEstimate], path) -> None:
    """Write estimates sorted by ``(od, interval)`` then day."""
    ordered = sorted(estimates, key=lambda e: (e.od, e.interval, e.day))
    rows = (
        (
            e.od, e.day, e.interval, repr(float(e.observed)), repr(float(e.counterfactual)),
            repr(float(e.effect)), repr(float(e.p_value)),
        )
        for e in ordered
    )
    _atomic_write_rows(path, EFFECTS_HEADER, rows)


def load_effects(path) -> list[CausalEffectEstimate]:
    out = []
    for lineno, row in _read_rows(path, EFFECTS_HEADER):
        out.append(
            CausalEffectEstimate(
                od=_parse_int(path, lineno, row[0], "od_id"),
                day=_parse_int(path, lineno, row[1], "day_index"),
                interval=_parse_int(path, lineno, row[2], "interval_index"),
                observed=_parse_float(path, lineno, row[3], "observed"),
                counterfactual=_parse_float(path, lineno, row[4], "counterfactual"),
                effect=_parse_float(path, lineno, row[5], "effect"),
                p_value=_parse_float(path, lineno, row[6], "p_value"),
            )
        )
    return out
