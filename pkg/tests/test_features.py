from __future__ import annotations

import io
import math
import random

import pytest

from conftest import F, P, R, S, graph_of, ref
from oracles import brute_betweenness, brute_closeness, random_digraph, random_events
from qdfg.features import (
    FEATURE_NAMES,
    FeatureConfig,
    betweenness,
    betweenness_all,
    closeness,
    entropy,
    extract_features,
    flow_proportion,
    normalized_entropy,
    population_variance,
    process_features,
    read_feature_csv,
    trace_features,
    variance,
    write_feature_csv,
)
from qdfg.graph import QDFG, build_graph, with_sizes
from qdfg.trace import EntityType, FlowEvent, Label


def star(sizes, kinds=None):
    kinds = kinds or [F] * len(sizes)
    g = QDFG()
    c = ref(P, "c:1")
    g.add_node(c)
    for i, (s, k) in enumerate(zip(sizes, kinds)):
        g.add_event(FlowEvent(c, ref(k, f"t{i}"), s, i))
    return g, c


def test_entropy_examples():
    g, c = star([2, 2, 2, 2])
    assert entropy(c, g) == 1.0
    g, c = star([3, 1])
    assert entropy(c, g) == pytest.approx(0.8113, abs=1e-4)
    g, c = star([])
    assert entropy(c, g) == 0.0
    assert normalized_entropy([7]) == 0.0


def test_variance_examples():
    assert variance(*reversed(star([2, 4]))) == 1.0
    assert variance(*reversed(star([5, 5, 5]))) == 0.0
    assert variance(*reversed(star([]))) == 0.0


def test_flow_proportion_examples():
    g, c = star([6, 2, 2], [F, S, P])
    assert flow_proportion(c, g, EntityType.FILE) == pytest.approx(0.6)
    g, c = star([1, 9], [F, F])
    assert flow_proportion(c, g, EntityType.FILE) == 1.0
    g, c = star([])
    assert flow_proportion(c, g, EntityType.FILE) == 0.0


def test_count_attribute_variant():
    g = build_graph([FlowEvent(ref(P, "a:1"), ref(F, "x"), 5, 1), FlowEvent(ref(P, "a:1"), ref(F, "x"), 5, 2),
                     FlowEvent(ref(P, "a:1"), ref(F, "y"), 10, 3)])
    a = ref(P, "a:1")
    assert entropy(a, g, "size") == 1.0
    assert entropy(a, g, "count") < 1.0
    assert variance(a, g, "count") == 0.25


def test_closeness_examples():
    g = graph_of({("a", "b"): 1, ("b", "c"): 1})
    assert closeness(ref(P, "a"), g) == pytest.approx(2 / 3)
    g, c = star([1, 1, 1])
    assert closeness(c, g) == 1.0
    single = QDFG()
    single.add_node(ref(P, "x"))
    assert closeness(ref(P, "x"), single) == 0.0


def test_closeness_unreachable_uses_surrogate():
    g = graph_of({("a", "b"): 2, ("c", "a"): 3})
    # d(a,b)=2, c unreachable -> 1 + total cost 5
    assert closeness(ref(P, "a"), g) == pytest.approx(2 / (2 + 6))


def test_betweenness_examples():
    chain = graph_of({("a", "b"): 1, ("b", "c"): 1})
    assert betweenness(ref(P, "b"), chain) == 1.0
    assert betweenness(ref(P, "a"), chain) == 0.0
    assert betweenness(ref(P, "c"), chain) == 0.0
    diamond = graph_of({("a", "b"): 1, ("b", "d"): 1, ("a", "c"): 1, ("c", "d"): 1})
    assert betweenness(ref(P, "b"), diamond) == 0.5


def _as_qdfg(nodes, edges):
    g = QDFG()
    for n in nodes:
        g.add_node(ref(P, f"n{n}"))
    for t, ((u, v), w) in enumerate(edges.items()):
        g.add_event(FlowEvent(ref(P, f"n{u}"), ref(P, f"n{v}"), w, t))
    return g


def test_centralities_match_enumeration():
    rng = random.Random(21)
    for _ in range(80):
        nodes, edges = random_digraph(rng, max_nodes=8, p=0.35)
        g = _as_qdfg(nodes, edges)
        bb, bc = brute_betweenness(nodes, edges), brute_closeness(nodes, edges)
        every = betweenness_all(g)
        for n in nodes:
            r = ref(P, f"n{n}")
            assert betweenness(r, g) == pytest.approx(bb[n], rel=1e-9, abs=1e-12)
            assert every[r] == pytest.approx(bb[n], rel=1e-9, abs=1e-12)
            assert closeness(r, g) == pytest.approx(bc[n], rel=1e-9)


def test_closeness_antitone_in_added_distance():
    rng = random.Random(4)
    for _ in range(100):
        nodes, edges = random_digraph(rng, max_nodes=8)
        if not edges:
            continue
        g = _as_qdfg(nodes, edges)
        n = ref(P, "n0")
        heavier = with_sizes(g, lambda s, d, e: e.size + 3 if s == n else e.size)
        # heavier out-edges lengthen every path from n and also raise the
        # surrogate distance, so no term of the distance sum can shrink
        assert closeness(n, heavier) <= closeness(n, g) + 1e-12


def test_scale_invariance():
    rng = random.Random(9)
    for _ in range(100):
        sizes = [rng.randint(1, 1000) for _ in range(rng.randint(1, 8))]
        c = rng.randint(2, 50)
        g, n = star(sizes)
        gs, ns = star([s * c for s in sizes])
        assert entropy(ns, gs) == pytest.approx(entropy(n, g), rel=1e-9, abs=1e-12)
        assert variance(ns, gs) == pytest.approx(c * c * variance(n, g), rel=1e-9)
        assert flow_proportion(ns, gs, EntityType.FILE) == flow_proportion(n, g, EntityType.FILE)


def test_population_variance_plain():
    assert population_variance([1, 2, 3, 4]) == 1.25


def test_isolated_process_is_all_zero():
    g = QDFG()
    g.add_node(ref(P, "p:1"))
    v = extract_features(g, ref(P, "p:1"), Label.BENIGN)
    assert v.values == (0.0,) * 8
    assert len(v.row()) == 9 and v.row()[-1] == "benign"


def test_self_replication_motif():
    g = QDFG()
    p = ref(P, "worm.exe:1")
    for i in range(12):
        g.add_event(FlowEvent(p, ref(F, f"copy{i}.exe"), 50_000, i))
    v = extract_features(g, p)
    assert v.values[0] == 1.0
    assert v.values[4] == 1.0


def test_feature_invariants_on_random_graphs():
    rng = random.Random(2)
    for _ in range(150):
        g = build_graph(random_events(rng))
        for p in g.process_nodes():
            v = extract_features(g, p).values
            assert len(v) == 8 and all(math.isfinite(x) for x in v)
            assert 0 <= v[0] <= 1
            assert all(0 <= x <= 1 for x in v[2:6]) and sum(v[2:6]) <= 1 + 1e-12
            assert v[6] >= 0 and v[7] >= 0


def test_features_computed_on_reachability_graph():
    # p2 -> p1 -> f: in the full graph p1 has betweenness 1, in its own
    # reachability graph nothing reaches p1
    g = graph_of({("p2", "p1"): 1, ("p1", "f"): 1}, {"f": F})
    assert betweenness(ref(P, "p1"), g) == 1.0
    assert extract_features(g, ref(P, "p1")).values[7] == 0.0


@pytest.mark.parametrize("config", [FeatureConfig(), FeatureConfig("count", "inverse")])
def test_process_features_equals_per_node_extraction(config):
    rng = random.Random(17)
    for _ in range(150):
        g = build_graph(random_events(rng, max_events=60, max_entities=10))
        fast = process_features(g, config)
        assert list(fast) == g.process_nodes()
        for p in g.process_nodes():
            assert tuple(fast[p]) == extract_features(g, p, config=config).values


def test_feature_config_validation():
    with pytest.raises(ValueError):
        FeatureConfig(attribute="time")


def test_csv_roundtrip(small_corpus):
    vectors = [v for t in small_corpus[:10] for v in trace_features(t)]
    buf = io.StringIO()
    write_feature_csv(vectors, buf, FEATURE_NAMES)
    header = buf.getvalue().splitlines()[0]
    assert header == "sample_id,node,phi1,phi2,phi3,phi4,phi5,phi6,phi7,phi8,label,family"
    columns, back = read_feature_csv(io.StringIO(buf.getvalue()))
    assert columns == list(FEATURE_NAMES)
    assert back == vectors


def test_registry_proportion():
    g, c = star([3, 1], [R, F])
    assert flow_proportion(c, g, EntityType.REGISTRY) == 0.75
