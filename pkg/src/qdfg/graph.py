"""Quantitative data flow graphs.

Nodes are :class:`EntityRef` objects typed P/F/S/U/R; an edge aggregates every
flow between one ordered pair of entities: the summed byte count (``size``),
the set of timestamps (``time``) and the number of contributing events
(``count``). Optional per-event extras are composed onto the edge with
last-write-wins per key.
"""

from __future__ import annotations

import heapq
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator

from .trace import EntityRef, EntityType, FlowEvent

SIZE_COST = "size"
INVERSE_COST = "inverse"
COSTS = (SIZE_COST, INVERSE_COST)

GRAPH_FORMAT = "qdfg-graph"
GRAPH_VERSION = 1


class DomainError(ValueError):
    """A node argument is absent from the graph or has the wrong type."""


@dataclass(slots=True)
class Edge:
    size: int
    time: set[int]
    count: int
    extra: dict[str, Any] = field(default_factory=dict)

    def copy(self) -> "Edge":
        return Edge(self.size, set(self.time), self.count, dict(self.extra))


class QDFG:
    """Mutable graph container; :func:`update` gives the functional view."""

    def __init__(self) -> None:
        self.nodes: dict[EntityRef, dict[str, Any]] = {}
        self.edges: dict[tuple[EntityRef, EntityRef], Edge] = {}
        self.attributes: set[str] = {"type", "size", "time", "count"}
        self._succ: dict[EntityRef, dict[EntityRef, Edge]] = {}
        self._pred: dict[EntityRef, set[EntityRef]] = {}

    # -- construction ----------------------------------------------------

    def add_node(self, node: EntityRef, **attrs: Any) -> None:
        if node not in self.nodes:
            self.nodes[node] = {"type": node.kind}
            self._succ[node] = {}
            self._pred[node] = set()
        self.nodes[node].update(attrs)

    def _put_edge(self, src: EntityRef, dst: EntityRef, edge: Edge) -> None:
        self.add_node(src)
        self.add_node(dst)
        self.edges[(src, dst)] = edge
        self._succ[src][dst] = edge
        self._pred[dst].add(src)

    def add_event(self, ev: FlowEvent) -> None:
        edge = self._succ.get(ev.src, {}).get(ev.dst)
        if edge is not None:
            edge.size += ev.size
            edge.time.add(ev.t)
            edge.count += 1
        else:
            edge = Edge(ev.size, {ev.t}, 1)
            self._put_edge(ev.src, ev.dst, edge)
        if ev.extra:
            edge.extra.update(ev.extra)
            self.attributes.update(ev.extra)

    def copy(self) -> "QDFG":
        g = QDFG()
        for n, attrs in self.nodes.items():
            g.add_node(n, **attrs)
        for (s, d), e in self.edges.items():
            g._put_edge(s, d, e.copy())
        g.attributes = set(self.attributes)
        return g

    # -- accessors -------------------------------------------------------

    def __contains__(self, node: object) -> bool:
        return node in self.nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QDFG):
            return NotImplemented
        return self.nodes == other.nodes and self.edges == other.edges

    def _check(self, n: EntityRef) -> None:
        if n not in self.nodes:
            raise DomainError(f"node {n} not in graph")

    def node_type(self, n: EntityRef) -> EntityType:
        self._check(n)
        return self.nodes[n]["type"]

    def successors(self, n: EntityRef) -> dict[EntityRef, Edge]:
        self._check(n)
        return self._succ[n]

    def pre(self, n: EntityRef) -> set[EntityRef]:
        self._check(n)
        return set(self._pred[n])

    def out_edges(self, n: EntityRef) -> set[tuple[EntityRef, EntityRef]]:
        self._check(n)
        return {(n, d) for d in self._succ[n]}

    def in_edges(self, n: EntityRef) -> set[tuple[EntityRef, EntityRef]]:
        self._check(n)
        return {(s, n) for s in self._pred[n]}

    def process_nodes(self) -> list[EntityRef]:
        return sorted(n for n in self.nodes if n.kind is EntityType.PROCESS)

    def total_size(self) -> int:
        return sum(e.size for e in self.edges.values())

    def iter_edges(self) -> Iterator[tuple[EntityRef, EntityRef, Edge]]:
        for (s, d), e in self.edges.items():
            yield s, d, e


def update(g: QDFG, ev: FlowEvent) -> QDFG:
    """Return a new graph with ``ev`` folded in; ``g`` is left untouched."""
    out = g.copy()
    out.add_event(ev)
    return out


def build_graph(events: Iterable[FlowEvent]) -> QDFG:
    g = QDFG()
    for ev in events:
        g.add_event(ev)
    return g


def pre(n: EntityRef, g: QDFG) -> set[EntityRef]:
    return g.pre(n)


def in_edges(n: EntityRef, g: QDFG) -> set[tuple[EntityRef, EntityRef]]:
    return g.in_edges(n)


def out_edges(n: EntityRef, g: QDFG) -> set[tuple[EntityRef, EntityRef]]:
    return g.out_edges(n)


def reachability_graph(g: QDFG, p: EntityRef) -> QDFG:
    """Forward closure from process ``p`` with every edge leaving the closure's nodes."""
    if p not in g.nodes:
        raise DomainError(f"node {p} not in graph")
    if g.node_type(p) is not EntityType.PROCESS:
        raise DomainError(f"{p} is not a process node")
    seen = {p}
    queue = deque([p])
    while queue:
        n = queue.popleft()
        for d in g._succ[n]:
            if d not in seen:
                seen.add(d)
                queue.append(d)
    rg = QDFG()
    for n in seen:
        rg.add_node(n, **g.nodes[n])
    for n in seen:
        for d, e in g._succ[n].items():
            rg._put_edge(n, d, e.copy())
    rg.attributes = set(g.attributes)
    return rg


def with_sizes(g: QDFG, new_size: Callable[[EntityRef, EntityRef, Edge], int]) -> QDFG:
    """Copy of ``g`` with every edge size replaced by ``new_size(src, dst, edge)``."""
    out = g.copy()
    for (s, d), e in out.edges.items():
        size = int(new_size(s, d, e))
        if size < 1:
            raise ValueError(f"edge size must stay positive, got {size}")
        e.size = size
    return out


# -- shortest paths -------------------------------------------------------

def edge_cost(edge: Edge, cost: str = SIZE_COST) -> float:
    if cost == SIZE_COST:
        return edge.size
    if cost == INVERSE_COST:
        return 1.0 / edge.size
    raise ValueError(f"unknown cost {cost!r}")


def dijkstra(g: QDFG, source: EntityRef, cost: str = SIZE_COST) -> dict[EntityRef, float]:
    """Distances from ``source`` to every reachable node (unreachable nodes absent)."""
    g._check(source)
    dist: dict[EntityRef, float] = {source: 0}
    heap: list[tuple[float, EntityRef]] = [(0, source)]
    done: set[EntityRef] = set()
    while heap:
        d, n = heapq.heappop(heap)
        if n in done:
            continue
        done.add(n)
        for m, e in g._succ[n].items():
            nd = d + edge_cost(e, cost)
            if m not in dist or nd < dist[m]:
                dist[m] = nd
                heapq.heappush(heap, (nd, m))
    return dist


def shortest_distance(g: QDFG, a: EntityRef, b: EntityRef, cost: str = SIZE_COST) -> float:
    """Minimum total edge cost from ``a`` to ``b``; ``math.inf`` when unreachable."""
    g._check(b)
    return dijkstra(g, a, cost).get(b, math.inf)


# -- serialization ----------------------------------------------------------

def _jsonable(value: Any) -> Any:
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    if isinstance(value, EntityType):
        return value.value
    return value


def to_json(g: QDFG, meta: dict[str, Any] | None = None) -> dict[str, Any]:
    nodes = []
    for n in sorted(g.nodes):
        entry: dict[str, Any] = {"id": str(n), "type": n.kind.value}
        extra = {k: _jsonable(v) for k, v in g.nodes[n].items() if k != "type"}
        if extra:
            entry["attrs"] = extra
        nodes.append(entry)
    edges = []
    for s, d in sorted(g.edges):
        e = g.edges[(s, d)]
        entry = {"src": str(s), "dst": str(d), "size": e.size, "time": sorted(e.time), "count": e.count}
        if e.extra:
            entry["extra"] = {k: _jsonable(v) for k, v in e.extra.items()}
        edges.append(entry)
    doc: dict[str, Any] = {"format": GRAPH_FORMAT, "version": GRAPH_VERSION, "nodes": nodes, "edges": edges}
    if meta:
        doc["meta"] = meta
    return doc


def dumps(g: QDFG, meta: dict[str, Any] | None = None) -> str:
    """Deterministic JSON text: equal graphs give byte-identical output."""
    return json.dumps(to_json(g, meta), sort_keys=True, separators=(",", ":"))


def from_json(doc: dict[str, Any]) -> QDFG:
    if doc.get("format") != GRAPH_FORMAT:
        raise ValueError("not a QDFG document")
    if doc.get("version") != GRAPH_VERSION:
        raise ValueError(f"unsupported graph version {doc.get('version')!r}")
    g = QDFG()
    for entry in doc["nodes"]:
        n = EntityRef.parse(entry["id"])
        g.add_node(n, **entry.get("attrs", {}))
    for entry in doc["edges"]:
        s, d = EntityRef.parse(entry["src"]), EntityRef.parse(entry["dst"])
        if s == d:
            raise ValueError(f"self-loop on {s}")
        if entry["size"] < 1 or entry["count"] < 1 or not entry["time"]:
            raise ValueError(f"edge {s}->{d} violates size/count/time invariants")
        edge = Edge(int(entry["size"]), set(entry["time"]), int(entry["count"]), dict(entry.get("extra", {})))
        g._put_edge(s, d, edge)
        g.attributes.update(edge.extra)
    return g


def loads(text: str) -> tuple[QDFG, dict[str, Any]]:
    doc = json.loads(text)
    return from_json(doc), doc.get("meta", {})


def _dot_quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def to_dot(g: QDFG, max_penwidth: float = 10.0) -> str:
    """Graphviz rendering; pen width tracks each edge's share of the largest flow."""
    biggest = max((e.size for e in g.edges.values()), default=1)
    lines = ["digraph qdfg {"]
    for n in sorted(g.nodes):
        lines.append(f"  {_dot_quote(str(n))};")
    for s, d in sorted(g.edges):
        e = g.edges[(s, d)]
        width = 1.0 + (max_penwidth - 1.0) * e.size / biggest
        lines.append(
            f"  {_dot_quote(str(s))} -> {_dot_quote(str(d))} "
            f"[label=\"{e.size}\", penwidth={width:.3f}];"
        )
    lines.append("}")
    return "\n".join(lines) + "\n"
