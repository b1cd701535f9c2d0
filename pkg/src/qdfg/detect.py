"""Train the graph-feature classifier and apply it to traces and graphs."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .features import N_FEATURES, FeatureConfig, FeatureVector, process_features, process_pid
from .forest import ClassifierConfig, RandomForest, encode_labels, smote, train_forest
from .graph import QDFG, build_graph
from .trace import Label, MappingTable, TraceLog, interpret_log


@dataclass
class Verdict:
    sample_id: str
    node: str
    label: Label
    score: float

    def to_json(self) -> dict:
        return {"sample_id": self.sample_id, "node": self.node, "label": self.label.value, "score": self.score}


def as_arrays(vectors: Sequence[FeatureVector]) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray([v.values for v in vectors], dtype=float)
    y = encode_labels([v.label or Label.UNKNOWN for v in vectors])
    return X, y


@dataclass
class QdfgDetector:
    forest: RandomForest
    features: FeatureConfig = FeatureConfig()
    name: str = "qdfg"

    @classmethod
    def from_forest(cls, forest: RandomForest) -> "QdfgDetector":
        meta = forest.meta
        if meta.get("kind", "qdfg") != "qdfg":
            raise ValueError("model is not a graph-feature model")
        if forest.n_features != N_FEATURES:
            raise ValueError(f"graph-feature model must take {N_FEATURES} features")
        return cls(forest, FeatureConfig(**meta.get("features", {})))

    def classify_graph(self, g: QDFG, trace: TraceLog | None = None) -> list[Verdict]:
        sample_id = trace.sample_id if trace else ""
        values = process_features(g, self.features)
        if not values:
            return []
        nodes = list(values)
        X = np.asarray(list(values.values()), dtype=float)
        scores = self.forest.scores(X)
        votes = self.forest.votes(X)
        n_trees = len(self.forest.trees)
        return [
            Verdict(sample_id, str(p), Label.MALICIOUS if 2 * v > n_trees else Label.BENIGN, float(s))
            for p, s, v in zip(nodes, scores, votes)
        ]

    def classify_trace(self, trace: TraceLog, table: MappingTable | None = None) -> list[Verdict]:
        return self.classify_graph(build_graph(interpret_log(trace, table)), trace)

    def is_malicious(self, trace: TraceLog) -> bool:
        """A trace is flagged when any of the sample's own processes is."""
        g = build_graph(interpret_log(trace))
        verdicts = self.classify_graph(g, trace)
        own = {
            str(p) for p in g.process_nodes()
            if process_pid(p) is None or process_pid(p) not in trace.background_pids
        }
        return any(v.label is Label.MALICIOUS for v in verdicts if v.node in own)


def train_qdfg(
    vectors: Sequence[FeatureVector],
    config: ClassifierConfig = ClassifierConfig(),
    features: FeatureConfig = FeatureConfig(),
    jobs: int = 1,
) -> QdfgDetector:
    X, y = as_arrays(vectors)
    Xb, yb = smote(X, y, config.smote_ratio, config.smote_k, seed=config.seed)
    forest = train_forest(Xb, yb, config, jobs=jobs, meta={"kind": "qdfg", "features": asdict(features)})
    return QdfgDetector(forest, features)

