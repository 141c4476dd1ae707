"""Remarkable-point graph: construction from event logs and queries.

The network is an undirected graph over RP ids. Edges are inferred from
consecutive observations of the same train on the same day, and carry the
median plan-level traversal time (observation time minus delay), so the
graph reflects the circulation plan rather than incident noise.
"""

from __future__ import annotations

import heapq
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import DataError
from .ingest import ObservationEvent, service_groups, event_sort_key

RP_ID_PATTERN = re.compile(r"^\d{6}[0-9A-Z]{2}$")


class RpKind(str, Enum):
    STATION = "station"
    BIFURCATION = "bifurcation"
    OTHER = "other"


def rp_kind(rp_id: str) -> RpKind:
    suffix = rp_id[-2:]
    if suffix == "BV":
        return RpKind.STATION
    if suffix == "BF":
        return RpKind.BIFURCATION
    return RpKind.OTHER


@dataclass(frozen=True)
class RemarkablePoint:
    """A named node of the macro-level network description."""

    id: str
    kind: RpKind
    position: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        if not RP_ID_PATTERN.match(self.id):
            raise DataError(f"invalid RP id {self.id!r}")
        if self.kind != rp_kind(self.id):
            raise DataError(f"RP kind {self.kind} inconsistent with suffix of {self.id!r}")

    @classmethod
    def from_id(cls, rp_id: str, position: tuple[float, float] = (0.0, 0.0)) -> "RemarkablePoint":
        return cls(rp_id, rp_kind(rp_id), position)


Edge = tuple[str, str]


def edge_key(a: str, b: str) -> Edge:
    return (a, b) if a <= b else (b, a)


@dataclass
class EdgeStats:
    median_minutes: float
    sample_count: int


@dataclass
class BuildReport:
    negative_samples_discarded: int = 0
    edges_pruned: int = 0
    samples: int = 0


@dataclass
class NetworkGraph:
    """Immutable after construction; safe for concurrent reads."""

    nodes: set[str] = field(default_factory=set)
    edge_stats: dict[Edge, EdgeStats] = field(default_factory=dict)
    positions: dict[str, tuple[float, float]] = field(default_factory=dict)
    diagnostics: BuildReport = field(default_factory=BuildReport)

    @property
    def edges(self) -> set[Edge]:
        return set(self.edge_stats)

    def neighbors(self, rp: str) -> list[tuple[str, float]]:
        out = []
        for (a, b), stats in self.edge_stats.items():
            if a == rp:
                out.append((b, stats.median_minutes))
            elif b == rp:
                out.append((a, stats.median_minutes))
        return sorted(out)

    def adjacency(self) -> dict[str, list[tuple[str, float]]]:
        adj: dict[str, list[tuple[str, float]]] = {n: [] for n in self.nodes}
        for (a, b), stats in self.edge_stats.items():
            adj[a].append((b, stats.median_minutes))
            adj[b].append((a, stats.median_minutes))
        for lst in adj.values():
            lst.sort()
        return adj


def _median(values: list[float]) -> float:
    vs = sorted(values)
    n = len(vs)
    mid = n // 2
    return vs[mid] if n % 2 else (vs[mid - 1] + vs[mid]) / 2.0


def build_graph(events: list[ObservationEvent], min_edge_samples: int = 1) -> NetworkGraph:
    """Infer the RP graph from a cleaned event log.

    Each consecutive same-train event pair on a day contributes the edge
    between their RPs with a traversal sample in plan time. Negative
    samples (after cleaning these are data glitches) are discarded and
    counted. Edges observed fewer than min_edge_samples times are pruned.
    """
    samples: dict[Edge, list[float]] = {}
    nodes: set[str] = set()
    report = BuildReport()
    for _, evs in sorted(service_groups(events).items()):
        evs = sorted(evs, key=lambda e: (e.rank if e.rank is not None else -1, event_sort_key(e)))
        for e in evs:
            nodes.add(e.rp)
        for a, b in zip(evs, evs[1:]):
            if a.rp == b.rp:
                continue  # dwell at a station, not an edge
            duration = (b.theoretical_time() - a.theoretical_time()).total_seconds() / 60.0
            if duration < 0:
                report.negative_samples_discarded += 1
                continue
            samples.setdefault(edge_key(a.rp, b.rp), []).append(duration)
            report.samples += 1

    edge_stats: dict[Edge, EdgeStats] = {}
    for edge, vals in samples.items():
        if len(vals) < min_edge_samples:
            report.edges_pruned += 1
            continue
        edge_stats[edge] = EdgeStats(median_minutes=_median(vals), sample_count=len(vals))
    return NetworkGraph(nodes=nodes, edge_stats=edge_stats, diagnostics=report)


def connected_components(g: NetworkGraph) -> list[list[str]]:
    """Maximal connected node sets, each sorted, ordered by smallest member."""
    adj = g.adjacency()
    seen: set[str] = set()
    comps: list[list[str]] = []
    for start in sorted(g.nodes):
        if start in seen:
            continue
        comp = []
        stack = [start]
        seen.add(start)
        while stack:
            u = stack.pop()
            comp.append(u)
            for v, _ in adj[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        comps.append(sorted(comp))
    comps.sort(key=lambda c: c[0])
    return comps


@dataclass(frozen=True)
class PathResult:
    minutes: float
    hops: int
    path: tuple[str, ...]


def shortest_path(g: NetworkGraph, src: str, dst: str) -> PathResult | None:
    """Minimum-minutes path; ties broken by fewer hops, then lexicographic
    path. Returns None when src and dst are in different components."""
    if src not in g.nodes or dst not in g.nodes:
        raise DataError(f"unknown RP id in shortest_path: {src!r} -> {dst!r}")
    if src == dst:
        return PathResult(0.0, 0, (src,))
    adj = g.adjacency()
    best: dict[str, tuple[float, int, tuple[str, ...]]] = {src: (0.0, 0, (src,))}
    heap: list[tuple[float, int, tuple[str, ...], str]] = [(0.0, 0, (src,), src)]
    while heap:
        minutes, hops, path, u = heapq.heappop(heap)
        if (minutes, hops, path) != best.get(u, (None, None, None)):
            continue
        if u == dst:
            return PathResult(minutes, hops, path)
        for v, w in adj[u]:
            cand = (minutes + w, hops + 1, path + (v,))
            if v not in best or cand < best[v]:
                best[v] = cand
                heapq.heappush(heap, (*cand, v))
    return None


# ----------------------------------------------------------------------------
# JSON serialization: nodes array + edges array of [id, id, median, count]
# ----------------------------------------------------------------------------


def graph_to_dict(g: NetworkGraph) -> dict:
    return {
        "nodes": sorted(g.nodes),
        "edges": [
            [a, b, g.edge_stats[(a, b)].median_minutes, g.edge_stats[(a, b)].sample_count]
            for a, b in sorted(g.edge_stats)
        ],
    }


def graph_from_dict(d: dict) -> NetworkGraph:
    nodes = set(d["nodes"])
    edge_stats = {}
    for a, b, median, count in d["edges"]:
        if a not in nodes or b not in nodes or a == b:
            raise DataError(f"edge {a!r}-{b!r} references missing node or is a self-loop")
        edge_stats[edge_key(a, b)] = EdgeStats(float(median), int(count))
    return NetworkGraph(nodes=nodes, edge_stats=edge_stats)


def save_graph(g: NetworkGraph, path: str | Path) -> None:
    Path(path).write_text(json.dumps(graph_to_dict(g), sort_keys=True))


def load_graph(path: str | Path) -> NetworkGraph:
    with open(path) as fh:
        return graph_from_dict(json.load(fh))
