from __future__ import annotations

import pytest

from qdfg.detect import QdfgDetector, train_qdfg
from qdfg.features import trace_features
from qdfg.forest import ClassifierConfig, RandomForest
from qdfg.ngram import train_ngram
from qdfg.trace import Label, RawEvent, TraceLog


@pytest.fixture(scope="module")
def detector(small_corpus):
    return train_qdfg([v for t in small_corpus for v in trace_features(t)], ClassifierConfig(seed=2))


def test_verdicts_cover_every_process(detector, small_corpus):
    t = small_corpus[-1]
    verdicts = detector.classify_trace(t)
    assert {v.node for v in verdicts} == {v.node for v in trace_features(t)}
    assert all(0 <= v.score <= 1 and v.sample_id == t.sample_id for v in verdicts)


def test_trace_without_flows_has_no_verdicts(detector):
    t = TraceLog("quiet", events=[RawEvent(1, 1, "p", "GetTickCount")])
    assert detector.classify_trace(t) == []
    assert not detector.is_malicious(t)


def test_training_accuracy(detector, small_corpus):
    hits = [detector.is_malicious(t) == (t.label is Label.MALICIOUS) for t in small_corpus]
    assert sum(hits) / len(hits) > 0.95


def test_model_roundtrip_through_json(detector, small_corpus):
    back = QdfgDetector.from_forest(RandomForest.loads(detector.forest.dumps()))
    t = small_corpus[0]
    assert back.classify_trace(t) == detector.classify_trace(t)


def test_ngram_model_is_rejected(small_corpus):
    with pytest.raises(ValueError):
        QdfgDetector.from_forest(train_ngram(small_corpus, 2).forest)
