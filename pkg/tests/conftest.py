from __future__ import annotations

import pytest

from qdfg.graph import QDFG
from qdfg.synth import default_corpus
from qdfg.trace import EntityRef, EntityType, FlowEvent

P = EntityType.PROCESS
F = EntityType.FILE
S = EntityType.SOCKET
R = EntityType.REGISTRY


def ref(kind: EntityType, name: str) -> EntityRef:
    return EntityRef(kind, name)


def graph_of(edges: dict[tuple[str, str], int], kinds: dict[str, EntityType] | None = None) -> QDFG:
    """Small graph from {("a", "b"): size}; nodes default to process type."""
    kinds = kinds or {}
    g = QDFG()
    for t, ((a, b), size) in enumerate(edges.items()):
        g.add_event(FlowEvent(ref(kinds.get(a, P), a), ref(kinds.get(b, P), b), size, t))
    return g


@pytest.fixture(scope="session")
def corpus():
    """The default six-family synthetic corpus, 150 traces per family."""
    return default_corpus(150, 0)


@pytest.fixture(scope="session")
def small_corpus():
    return default_corpus(20, 0)
