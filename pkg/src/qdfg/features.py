"""Per-process graph features.

Local features look only at a node's outgoing edges: normalized entropy and
population variance of the outgoing weight distribution, and the share of
outgoing flow per target entity type. Global features use flow-weighted
shortest paths: closeness and (Brandes-accumulated) betweenness centrality.
Every feature of a process is evaluated on that process's reachability graph.
"""

from __future__ import annotations

import csv
import heapq
import math
from collections import deque
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

from .graph import SIZE_COST, QDFG, DomainError, build_graph, dijkstra, edge_cost, reachability_graph
from .trace import EntityRef, EntityType, Label, MappingTable, TraceLog, interpret_log

PROPORTION_TYPES = (EntityType.PROCESS, EntityType.REGISTRY, EntityType.FILE, EntityType.SOCKET)
FEATURE_NAMES = ("phi1", "phi2", "phi3", "phi4", "phi5", "phi6", "phi7", "phi8")
FEATURE_DESCRIPTIONS = (
    "entropy",
    "variance",
    "proportion_P",
    "proportion_R",
    "proportion_F",
    "proportion_S",
    "closeness",
    "betweenness",
)
N_FEATURES = len(FEATURE_NAMES)
DISTRIBUTION_ATTRIBUTES = ("size", "count")


@dataclass(frozen=True)
class FeatureConfig:
    # edge attribute feeding the entropy/variance distribution
    attribute: str = "size"
    # path cost for closeness/betweenness: "size" (literal) or "inverse"
    cost: str = SIZE_COST

    def __post_init__(self) -> None:
        if self.attribute not in DISTRIBUTION_ATTRIBUTES:
            raise ValueError(f"attribute must be one of {DISTRIBUTION_ATTRIBUTES}")


@dataclass
class FeatureVector:
    node: str
    values: tuple[float, ...]
    label: Label | None = None
    family: str | None = None
    sample_id: str = ""

    def row(self) -> list[float | str | None]:
        """Values followed by the label slot."""
        return [*self.values, self.label.value if self.label else None]


def _out_weights(n: EntityRef, g: QDFG, attribute: str) -> list[int]:
    if attribute == "size":
        return [e.size for e in g.successors(n).values()]
    if attribute == "count":
        return [e.count for e in g.successors(n).values()]
    raise ValueError(f"unknown distribution attribute {attribute!r}")


def normalized_entropy(weights: Sequence[float]) -> float:
    k = len(weights)
    if k <= 1:
        return 0.0
    first = weights[0]
    if all(w == first for w in weights):
        return 1.0
    total = math.fsum(weights)
    # fsum keeps the result independent of edge order
    h = -math.fsum(w / total * math.log(w / total) for w in weights if w > 0)
    return min(1.0, max(0.0, h / math.log(k)))


def population_variance(weights: Sequence[float]) -> float:
    k = len(weights)
    if k <= 1:
        return 0.0
    mean = math.fsum(weights) / k
    return math.fsum((w - mean) ** 2 for w in weights) / k


def entropy(n: EntityRef, g: QDFG, attribute: str = "size") -> float:
    return normalized_entropy(_out_weights(n, g, attribute))


def variance(n: EntityRef, g: QDFG, attribute: str = "size") -> float:
    return population_variance(_out_weights(n, g, attribute))


def flow_proportion(n: EntityRef, g: QDFG, t: EntityType) -> float:
    """Share of ``n``'s outgoing bytes that land on nodes of type ``t``."""
    out = g.successors(n)
    total = sum(e.size for e in out.values())
    if total == 0:
        return 0.0
    return sum(e.size for d, e in out.items() if d.kind is t) / total


def closeness(n: EntityRef, g: QDFG, cost: str = SIZE_COST) -> float:
    """(|N|-1) over the summed distance to every other node.

    Unreachable nodes count at a surrogate distance of one plus the total
    edge cost of the graph, longer than any simple path.
    """
    if len(g) < 2:
        return 0.0
    dist = dijkstra(g, n, cost)
    far = 1 + math.fsum(edge_cost(e, cost) for e in g.edges.values())
    total = math.fsum(dist.get(m, far) for m in g.nodes if m != n)
    return (len(g) - 1) / total


def _dependencies(g: QDFG, s: EntityRef, cost: str) -> dict[EntityRef, float]:
    """Brandes dependency of source ``s`` on every node it reaches (``s`` excluded).

    Heap ties break on the node itself, so the settle order, and with it every
    floating-point sum, is independent of edge insertion order.
    """
    order: list[EntityRef] = []
    preds: dict[EntityRef, list[EntityRef]] = {s: []}
    sigma: dict[EntityRef, int] = {s: 1}
    dist: dict[EntityRef, float] = {s: 0}
    done: set[EntityRef] = set()
    heap: list[tuple[float, EntityRef]] = [(0, s)]
    while heap:
        d, v = heapq.heappop(heap)
        if v in done:
            continue
        done.add(v)
        order.append(v)
        for w, e in g._succ[v].items():
            vw = d + edge_cost(e, cost)
            known = dist.get(w)
            if known is None or vw < known:
                dist[w] = vw
                sigma[w] = sigma[v]
                preds[w] = [v]
                heapq.heappush(heap, (vw, w))
            elif vw == known:
                sigma[w] += sigma[v]
                preds[w].append(v)
    delta = dict.fromkeys(order, 0.0)
    for w in reversed(order):
        coeff = (1.0 + delta[w]) / sigma[w]
        for v in sorted(preds[w]):
            delta[v] += sigma[v] * coeff
    del delta[s]
    return delta


def betweenness_all(g: QDFG, cost: str = SIZE_COST) -> dict[EntityRef, float]:
    """Unnormalized betweenness of every node over ordered pairs."""
    parts: dict[EntityRef, list[float]] = {n: [] for n in g.nodes}
    for s in g.nodes:
        for w, d in _dependencies(g, s, cost).items():
            parts[w].append(d)
    return {n: math.fsum(v) for n, v in parts.items()}


def _ancestors(g: QDFG, n: EntityRef) -> set[EntityRef]:
    seen = {n}
    queue = deque([n])
    while queue:
        m = queue.popleft()
        for p in g._pred[m]:
            if p not in seen:
                seen.add(p)
                queue.append(p)
    return seen


def betweenness(n: EntityRef, g: QDFG, cost: str = SIZE_COST) -> float:
    if n not in g.nodes:
        raise DomainError(f"node {n} not in graph")
    # only sources that can reach n put any dependency on it
    return math.fsum(_dependencies(g, s, cost)[n] for s in _ancestors(g, n) - {n})


def local_features(n: EntityRef, g: QDFG, config: FeatureConfig = FeatureConfig()) -> list[float]:
    return [
        entropy(n, g, config.attribute),
        variance(n, g, config.attribute),
        *(flow_proportion(n, g, t) for t in PROPORTION_TYPES),
    ]


def global_features(n: EntityRef, g: QDFG, config: FeatureConfig = FeatureConfig()) -> list[float]:
    return [closeness(n, g, config.cost), betweenness(n, g, config.cost)]


def extract_features(
    g: QDFG,
    p: EntityRef,
    label: Label | None = None,
    family: str | None = None,
    config: FeatureConfig = FeatureConfig(),
    sample_id: str = "",
) -> FeatureVector:
    rg = reachability_graph(g, p)
    values = local_features(p, rg, config) + global_features(p, rg, config)
    return FeatureVector(str(p), tuple(float(v) for v in values), label, family, sample_id)


def _closure(g: QDFG, p: EntityRef) -> set[EntityRef]:
    seen = {p}
    queue = deque([p])
    while queue:
        for d in g._succ[queue.popleft()]:
            if d not in seen:
                seen.add(d)
                queue.append(d)
    return seen


def process_global_features(g: QDFG, config: FeatureConfig = FeatureConfig()) -> dict[EntityRef, list[float]]:
    """Closeness and betweenness of every process node on its reachability graph.

    A process's reachability graph is the forward closure C of the process,
    and everything reachable from a node of C stays inside C. Shortest paths
    from any source in C are therefore the same in ``g``, so one dependency
    pass per source is shared by all processes instead of rebuilding every
    closure's centralities from scratch.
    """
    deps: dict[EntityRef, dict[EntityRef, float]] = {}
    out: dict[EntityRef, list[float]] = {}
    for p in g.process_nodes():
        closure = _closure(g, p)
        if len(closure) < 2:
            close = 0.0
        else:
            dist = dijkstra(g, p, config.cost)
            far = 1 + math.fsum(edge_cost(e, config.cost) for n in closure for e in g._succ[n].values())
            close = (len(closure) - 1) / math.fsum(dist.get(m, far) for m in closure if m != p)
        parts = []
        for s in _ancestors(g, p) & closure - {p}:
            if s not in deps:
                deps[s] = _dependencies(g, s, config.cost)
            parts.append(deps[s][p])
        out[p] = [close, math.fsum(parts)]
    return out


def process_features(g: QDFG, config: FeatureConfig = FeatureConfig()) -> dict[EntityRef, list[float]]:
    """Feature values of every process node, equal to per-node :func:`extract_features`."""
    # out-edges of a node are the same in g and in its reachability graph
    return {p: local_features(p, g, config) + glob for p, glob in process_global_features(g, config).items()}


def process_pid(node: EntityRef) -> int | None:
    _, _, pid = node.name.rpartition(":")
    return int(pid) if pid.lstrip("-").isdigit() else None


def node_label(trace: TraceLog, node: EntityRef) -> Label:
    pid = process_pid(node)
    return trace.process_label(pid) if pid is not None else trace.label


def graph_features(
    g: QDFG,
    trace: TraceLog,
    config: FeatureConfig = FeatureConfig(),
) -> list[FeatureVector]:
    """One labeled vector per process node of ``g`` (which came from ``trace``)."""
    return [
        FeatureVector(str(p), tuple(float(v) for v in values), node_label(trace, p), trace.family, trace.sample_id)
        for p, values in process_features(g, config).items()
    ]


def trace_features(
    trace: TraceLog,
    config: FeatureConfig = FeatureConfig(),
    table: MappingTable | None = None,
) -> list[FeatureVector]:
    return graph_features(build_graph(interpret_log(trace, table)), trace, config)


# -- CSV interchange ----------------------------------------------------------

def write_feature_csv(
    vectors: Iterable[FeatureVector],
    stream: IO[str],
    columns: Sequence[str] = FEATURE_NAMES,
) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["sample_id", "node", *columns, "label", "family"])
    for v in vectors:
        if len(v.values) != len(columns):
            raise ValueError(f"vector for {v.node} has {len(v.values)} values, expected {len(columns)}")
        writer.writerow(
            [v.sample_id, v.node, *(repr(float(x)) for x in v.values),
             v.label.value if v.label else "", v.family or ""]
        )


def read_feature_csv(stream: IO[str]) -> tuple[list[str], list[FeatureVector]]:
    """Returns (feature column names, vectors)."""
    reader = csv.reader(stream)
    header = next(reader, None)
    if not header or header[:2] != ["sample_id", "node"] or header[-2:] != ["label", "family"]:
        raise ValueError("not a feature CSV (expected sample_id,node,...,label,family)")
    columns = header[2:-2]
    vectors = []
    for lineno, row in enumerate(reader, start=2):
        if len(row) != len(header):
            raise ValueError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            values = tuple(float(x) for x in row[2:-2])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        if not all(math.isfinite(x) for x in values):
            raise ValueError(f"line {lineno}: non-finite feature value")
        label = Label(row[-2]) if row[-2] else None
        vectors.append(FeatureVector(row[1], values, label, row[-1] or None, row[0]))
    return columns, vectors
