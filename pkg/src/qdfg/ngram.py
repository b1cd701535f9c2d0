"""Unordered n-gram baseline over raw call names.

A gram is the sorted multiset of ``n`` consecutive api names joined by ``|``,
so order inside a window is ignored but order across windows is not.
Profiles become relative-frequency vectors over a vocabulary of the top-K
training grams and feed the same random forest as the graph features.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .features import FeatureVector
from .forest import ClassifierConfig, RandomForest, encode_labels, smote, train_forest
from .trace import Label, TraceLog

DEFAULT_VOCABULARY = 500


def gram_key(window: Sequence[str]) -> str:
    return "|".join(sorted(window))


def ngram_profile(calls: Sequence[str], n: int) -> Counter[str]:
    if n < 1:
        raise ValueError("n must be >= 1")
    return Counter(gram_key(calls[i:i + n]) for i in range(len(calls) - n + 1))


def build_vocabulary(profiles: Iterable[Counter[str]], size: int = DEFAULT_VOCABULARY) -> list[str]:
    """Top-``size`` grams by corpus frequency; ties broken by key for stability."""
    total: Counter[str] = Counter()
    for p in profiles:
        total.update(p)
    ranked = sorted(total.items(), key=lambda kv: (-kv[1], kv[0]))
    return [k for k, _ in ranked[:size]]


def vectorize(profile: Counter[str], vocabulary: Sequence[str]) -> list[float]:
    total = sum(profile.values())
    if total == 0:
        return [0.0] * len(vocabulary)
    return [profile.get(g, 0) / total for g in vocabulary]


def trace_vector(trace: TraceLog, n: int, vocabulary: Sequence[str]) -> list[float]:
    return vectorize(ngram_profile(trace.calls(), n), vocabulary)


def profile_vectors(traces: Sequence[TraceLog], n: int, vocabulary: Sequence[str]) -> list[FeatureVector]:
    """Per-trace vectors in the feature-CSV shape (gram keys as columns)."""
    return [
        FeatureVector(trace.sample_id, tuple(trace_vector(trace, n, vocabulary)),
                      trace.label if trace.label is not Label.UNKNOWN else None, trace.family, trace.sample_id)
        for trace in traces
    ]


@dataclass
class NgramDetector:
    n: int
    vocabulary: list[str]
    forest: RandomForest

    @property
    def name(self) -> str:
        return f"ngram{self.n}"

    def score(self, trace: TraceLog) -> float:
        return float(self.forest.scores(np.asarray([trace_vector(trace, self.n, self.vocabulary)]))[0])

    def is_malicious(self, trace: TraceLog) -> bool:
        return bool(self.forest.predict(np.asarray([trace_vector(trace, self.n, self.vocabulary)]))[0])

    @classmethod
    def from_forest(cls, forest: RandomForest) -> "NgramDetector":
        meta = forest.meta
        if meta.get("kind") != "ngram":
            raise ValueError("model is not an n-gram model")
        return cls(int(meta["n"]), list(meta["vocabulary"]), forest)


def train_ngram(
    traces: Sequence[TraceLog],
    n: int,
    config: ClassifierConfig = ClassifierConfig(),
    vocabulary_size: int = DEFAULT_VOCABULARY,
) -> NgramDetector:
    """Train on labeled traces (one sample per trace), SMOTE-balanced."""
    profiles = [ngram_profile(t.calls(), n) for t in traces]
    vocab = build_vocabulary(profiles, vocabulary_size)
    if not vocab:
        raise ValueError("no grams in training traces")
    X = np.asarray([vectorize(p, vocab) for p in profiles])
    y = encode_labels([t.label for t in traces])
    Xb, yb = smote(X, y, config.smote_ratio, config.smote_k, seed=config.seed)
    forest = train_forest(Xb, yb, config, meta={"kind": "ngram", "n": n, "vocabulary": vocab})
    return NgramDetector(n, vocab, forest)
