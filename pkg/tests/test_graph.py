from __future__ import annotations

import json
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import F, P, graph_of, ref
from oracles import floyd_warshall, naive_graph, random_digraph, random_events
from qdfg import graph as qg
from qdfg.graph import (
    INVERSE_COST,
    QDFG,
    DomainError,
    build_graph,
    dijkstra,
    in_edges,
    out_edges,
    pre,
    reachability_graph,
    shortest_distance,
    update,
    with_sizes,
)
from qdfg.trace import EntityType, FlowEvent

p1, f1, f2 = ref(P, "p1:1"), ref(F, "f1"), ref(F, "f2")


def test_update_new_edge():
    g = update(QDFG(), FlowEvent(p1, f1, 100, 5))
    assert set(g.nodes) == {p1, f1}
    e = g.edges[(p1, f1)]
    assert (e.size, e.time, e.count) == (100, {5}, 1)
    assert g.node_type(f1) is EntityType.FILE


def test_update_existing_edge_aggregates():
    g = update(update(QDFG(), FlowEvent(p1, f1, 100, 5)), FlowEvent(p1, f1, 50, 9))
    e = g.edges[(p1, f1)]
    assert (e.size, e.time, e.count) == (150, {5, 9}, 2)
    assert len(g.edges) == 1 and len(g) == 2


def test_update_does_not_mutate_input():
    g0 = update(QDFG(), FlowEvent(p1, f1, 100, 5))
    g1 = update(g0, FlowEvent(p1, f2, 7, 9))
    assert len(g0.edges) == 1
    assert g1.edges[(p1, f1)] == g0.edges[(p1, f1)]
    assert g1.edges[(p1, f2)].size == 7 and f2 in g1.nodes


def test_extras_compose_last_write_wins():
    g = build_graph([FlowEvent(p1, f1, 1, 1, {"a": 1, "b": 2}), FlowEvent(p1, f1, 1, 2, {"a": 3})])
    assert g.edges[(p1, f1)].extra == {"a": 3, "b": 2}
    assert {"a", "b"} <= g.attributes


def test_build_graph_empty():
    g = build_graph([])
    assert len(g) == 0 and not g.edges


def test_replay_oracle_on_random_lists():
    rng = random.Random(11)
    for _ in range(300):
        events = random_events(rng)
        g = build_graph(events)
        nodes, edges = naive_graph(events)
        assert {n: g.node_type(n) for n in g.nodes} == nodes
        assert {k: (e.size, frozenset(e.time), e.count) for k, e in g.edges.items()} == edges


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permutation_invariance_property(seed):
    rng = random.Random(seed)
    events = random_events(rng)
    shuffled = events[:]
    rng.shuffle(shuffled)
    assert qg.dumps(build_graph(events)) == qg.dumps(build_graph(shuffled))
    assert build_graph(events) == build_graph(shuffled)


def test_accessors_on_chain():
    g = graph_of({("a", "b"): 1, ("b", "c"): 1})
    a, b, c = (ref(P, x) for x in "abc")
    assert pre(b, g) == {a}
    assert out_edges(b, g) == {(b, c)}
    assert in_edges(b, g) == {(a, b)}


def test_accessors_on_isolated_node():
    g = QDFG()
    g.add_node(p1)
    assert pre(p1, g) == set() and in_edges(p1, g) == set() and out_edges(p1, g) == set()


def test_accessors_reject_absent_node():
    with pytest.raises(DomainError):
        pre(p1, QDFG())


def test_reachability_graph_forward_closure():
    kinds = {"f1": F, "f2": F}
    g = graph_of({("p1", "f1"): 1, ("f1", "p2"): 1, ("p3", "f2"): 1}, kinds)
    rg = reachability_graph(g, ref(P, "p1"))
    assert set(rg.nodes) == {ref(P, "p1"), ref(F, "f1"), ref(P, "p2")}
    assert set(rg.edges) == {(ref(P, "p1"), ref(F, "f1")), (ref(F, "f1"), ref(P, "p2"))}


def test_reachability_isolated_and_saturated():
    g = QDFG()
    g.add_node(p1)
    assert len(reachability_graph(g, p1)) == 1
    full = graph_of({(a, b): 1 for a in "abc" for b in "abc" if a != b})
    assert reachability_graph(full, ref(P, "a")) == full


def test_reachability_errors():
    g = build_graph([FlowEvent(p1, f1, 1, 1)])
    with pytest.raises(DomainError):
        reachability_graph(g, f1)
    with pytest.raises(DomainError):
        reachability_graph(g, ref(P, "nope"))


def test_reachability_graph_is_valid_qdfg():
    rng = random.Random(5)
    for _ in range(100):
        g = build_graph(random_events(rng))
        for p in g.process_nodes():
            rg = reachability_graph(g, p)
            for (s, d), e in rg.edges.items():
                assert s in rg.nodes and d in rg.nodes
                assert e.size >= 1 and e.time and e.count >= 1
                assert e == g.edges[(s, d)]
            assert all("type" in attrs for attrs in rg.nodes.values())


def test_shortest_distance_examples():
    assert shortest_distance(graph_of({("a", "b"): 5}), ref(P, "a"), ref(P, "b")) == 5
    g = graph_of({("a", "b"): 1, ("b", "c"): 2, ("a", "c"): 10})
    assert shortest_distance(g, ref(P, "a"), ref(P, "c")) == 3
    assert shortest_distance(g, ref(P, "a"), ref(P, "a")) == 0
    assert shortest_distance(graph_of({("b", "a"): 1}), ref(P, "a"), ref(P, "b")) == math.inf


def _as_qdfg(nodes, edges) -> QDFG:
    g = QDFG()
    for n in nodes:
        g.add_node(ref(P, f"n{n}"))
    for t, ((u, v), w) in enumerate(edges.items()):
        g.add_event(FlowEvent(ref(P, f"n{u}"), ref(P, f"n{v}"), w, t))
    return g


def test_dijkstra_matches_floyd_warshall_and_triangle_inequality():
    rng = random.Random(3)
    for _ in range(200):
        nodes, edges = random_digraph(rng, max_nodes=12, p=0.35, max_w=9)
        g = _as_qdfg(nodes, edges)
        fw = floyd_warshall(nodes, edges)
        for u in nodes:
            for v in nodes:
                assert shortest_distance(g, ref(P, f"n{u}"), ref(P, f"n{v}")) == fw[(u, v)]
        for u in nodes:
            for v in nodes:
                for w in nodes:
                    assert fw[(u, w)] <= fw[(u, v)] + fw[(v, w)]


def test_inverse_cost():
    g = graph_of({("a", "b"): 4, ("b", "c"): 4, ("a", "c"): 1})
    d = dijkstra(g, ref(P, "a"), INVERSE_COST)
    assert d[ref(P, "c")] == pytest.approx(0.5)


def test_with_sizes_copies():
    g = graph_of({("a", "b"): 4, ("b", "c"): 9})
    ones = with_sizes(g, lambda s, d, e: 1)
    assert all(e.size == 1 for e in ones.edges.values())
    assert g.edges[(ref(P, "a"), ref(P, "b"))].size == 4


def test_json_roundtrip_and_determinism():
    rng = random.Random(8)
    for _ in range(50):
        events = random_events(rng)
        g = build_graph(events)
        text = qg.dumps(g, {"sample_id": "x"})
        back, meta = qg.loads(text)
        assert back == g and meta == {"sample_id": "x"}
        assert qg.dumps(back, meta) == text


def test_json_document_shape():
    doc = qg.to_json(build_graph([FlowEvent(p1, f1, 3, 2), FlowEvent(p1, f1, 4, 1)]))
    assert doc["format"] == "qdfg-graph"
    assert doc["edges"] == [{"src": "P:p1:1", "dst": "F:f1", "size": 7, "time": [1, 2], "count": 2}]
    assert [n["id"] for n in doc["nodes"]] == sorted(n["id"] for n in doc["nodes"])


def test_from_json_rejects_bad_documents():
    with pytest.raises(ValueError):
        qg.from_json({"format": "other"})
    doc = qg.to_json(build_graph([FlowEvent(p1, f1, 3, 2)]))
    doc["edges"][0]["size"] = 0
    with pytest.raises(ValueError):
        qg.from_json(json.loads(json.dumps(doc)))


def test_dot_pen_width_tracks_relative_size():
    g = build_graph([FlowEvent(p1, f1, 100, 1), FlowEvent(p1, f2, 10, 1)])
    dot = qg.to_dot(g)
    assert dot.startswith("digraph")
    assert "penwidth=10.00" in dot and "penwidth=1.90" in dot
