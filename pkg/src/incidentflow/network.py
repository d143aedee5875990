"""Station graph and hop-count shortest paths.

Distances count stations traversed (unweighted edges). Transfer stations are
single nodes shared by several lines, with no transfer penalty.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .exceptions import DomainError, ParseError, StationLookupError
from .panel_io import _atomic_write_rows, _read_rows

NETWORK_HEADER = ("line_id", "seq", "station_id")


@dataclass(frozen=True)
class StationGraph:
    """Undirected station adjacency built from ordered line station lists.

    Neighbour tuples are kept sorted so every traversal is deterministic.
    """

    adjacency: Mapping[str, tuple[str, ...]]
    line_of: Mapping[str, frozenset[str]]
    lines: Mapping[str, tuple[str, ...]]

    @classmethod
    def from_lines(cls, lines: Mapping[str, Sequence[str]]) -> "StationGraph":
        adj: dict[str, set[str]] = {}
        line_of: dict[str, set[str]] = {}
        for line_id, stations in lines.items():
            stations = [str(s) for s in stations]
            if not stations:
                raise DomainError(f"line {line_id} has no stations")
            for s in stations:
                adj.setdefault(s, set())
                line_of.setdefault(s, set()).add(str(line_id))
            for a, b in zip(stations, stations[1:]):
                if a == b:
                    raise DomainError(f"line {line_id}: self-loop at {a}")
                adj[a].add(b)
                adj[b].add(a)
        return cls(
            adjacency={s: tuple(sorted(n)) for s, n in sorted(adj.items())},
            line_of={s: frozenset(l) for s, l in sorted(line_of.items())},
            lines={str(k): tuple(str(s) for s in v) for k, v in lines.items()},
        )

    @property
    def stations(self) -> tuple[str, ...]:
        return tuple(self.adjacency)

    def __contains__(self, station) -> bool:
        return station in self.adjacency

    def neighbors(self, station: str) -> tuple[str, ...]:
        try:
            return self.adjacency[station]
        except KeyError:
            raise StationLookupError(station) from None

    def _require(self, station):
        if station not in self.adjacency:
            raise StationLookupError(station)

    def bfs_distances(self, sources: Iterable[str]) -> dict[str, int]:
        """Hop distance from the nearest of ``sources`` to every reachable station."""
        dist: dict[str, int] = {}
        queue = deque()
        for s in sorted(set(sources)):
            self._require(s)
            dist[s] = 0
            queue.append(s)
        while queue:
            u = queue.popleft()
            for v in self.adjacency[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        return dist


def shortest_hops(graph: StationGraph, origin: str, targets: Iterable[str]) -> int | None:
    """Minimum hop count from ``origin`` to any station in ``targets``.

    Returns ``None`` when no target is reachable.
    """
    targets = set(targets)
    if not targets:
        raise DomainError("target set is empty")
    graph._require(origin)
    for t in targets:
        graph._require(t)
    if origin in targets:
        return 0
    dist = {origin: 0}
    queue = deque([origin])
    while queue:
        u = queue.popleft()
        for v in graph.adjacency[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                if v in targets:
                    return dist[v]
                queue.append(v)
    return None


def shortest_path(graph: StationGraph, origin: str, destination: str) -> tuple[str, ...] | None:
    """Lexicographically smallest among the minimum-hop paths, or ``None``.

    Distances to ``destination`` are computed first; the path is then walked
    greedily from ``origin`` always stepping to the smallest neighbour that is
    one hop closer.
    """
    graph._require(origin)
    graph._require(destination)
    if origin == destination:
        raise DomainError("origin and destination must differ")
    to_dest = graph.bfs_distances([destination])
    if origin not in to_dest:
        return None
    path = [origin]
    node = origin
    while node != destination:
        want = to_dest[node] - 1
        node = next(v for v in graph.adjacency[node] if to_dest.get(v) == want)
        path.append(node)
    return tuple(path)


def overlap_proportion(
    graph: StationGraph, origin: str, destination: str, incident_stations: Iterable[str]
) -> float | None:
    """Share of stations on the OD shortest path that lie in the incident interval."""
    path = shortest_path(graph, origin, destination)
    if path is None:
        return None
    affected = set(incident_stations)
    return sum(s in affected for s in path) / len(path)


def load_network(path) -> StationGraph:
    lines: dict[str, list[tuple[int, str]]] = {}
    for lineno, row in _read_rows(path, NETWORK_HEADER):
        try:
            seq = int(row[1])
        except ValueError:
            raise ParseError(path, lineno, f"seq: not an integer: {row[1]!r}") from None
        if not row[2]:
            raise ParseError(path, lineno, "empty station_id")
        lines.setdefault(row[0], []).append((seq, row[2]))
    ordered = {}
    for line_id, entries in lines.items():
        entries.sort()
        seqs = [s for s, _ in entries]
        if len(set(seqs)) != len(seqs):
            raise DomainError(f"{path}: line {line_id} has duplicate seq values")
        ordered[line_id] = [station for _, station in entries]
    return StationGraph.from_lines(dict(sorted(ordered.items())))


def save_network(graph: StationGraph, path) -> None:
    rows = (
        (line_id, seq, station)
        for line_id, stations in sorted(graph.lines.items())
        for seq, station in enumerate(stations)
    )
    _atomic_write_rows(Path(path), NETWORK_HEADER, rows)
