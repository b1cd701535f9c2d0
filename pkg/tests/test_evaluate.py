from __future__ import annotations

import io
import math

import numpy as np
import pytest

from qdfg.evaluate import (
    SWEEP_HEADER,
    AblationMode,
    ConfusionCounts,
    Dataset,
    ablate_graph,
    cross_validate,
    degradation_ratio,
    labeled_graphs,
    leave_one_family_out,
    obfuscation_sweep,
    quality_metrics,
    quantity_ablation,
    stratified_folds,
    timing_profile,
    write_sweep_csv,
)
from qdfg.features import trace_features
from qdfg.forest import ClassifierConfig
from qdfg.detect import train_qdfg
from qdfg.ngram import train_ngram
from qdfg.obfuscate import ObfuscationConfig
from qdfg.synth import mesh_trace
from qdfg.trace import Label, TraceLog


@pytest.fixture(scope="module")
def small_data(small_corpus):
    return Dataset.from_vectors([v for t in small_corpus for v in trace_features(t)])


def test_metrics_example():
    m = quality_metrics(ConfusionCounts(tp=98, tn=99, fp=1, fn=2))
    assert m.dr == 0.98 and m.fpr == 0.01
    assert m.precision == pytest.approx(98 / 99)
    assert m.f_measure == pytest.approx(2 * m.precision * m.dr / (m.precision + m.dr))


def test_metrics_conventions():
    m = quality_metrics(ConfusionCounts(tp=0, tn=5, fp=0, fn=5))
    assert m.precision == 1.0 and m.dr == 0.0 and m.f_measure == 0.0
    with pytest.raises(ValueError):
        quality_metrics(ConfusionCounts(tp=3, fn=0, tn=0, fp=0))


def test_confusion_from_predictions():
    c = ConfusionCounts.from_predictions(np.array([1, 1, 0, 0, 0]), np.array([1, 0, 1, 0, 0]))
    assert c == ConfusionCounts(tp=1, tn=2, fp=1, fn=1)
    assert (c + c).mw == 4


def test_degradation_ratio():
    assert degradation_ratio(0.0085, 0.0048) == pytest.approx(1.77, abs=0.01)
    assert degradation_ratio(0.0, 0.0) == 1.0
    assert degradation_ratio(0.1, 0.0) == math.inf


def test_stratified_folds_partition_and_balance():
    y = np.array([0] * 23 + [1] * 7)
    folds = stratified_folds(y, 5, np.random.default_rng(0))
    assert sorted(np.concatenate(folds).tolist()) == list(range(30))
    assert all(1 <= int(y[f].sum()) <= 2 for f in folds)


def test_cross_validation_is_deterministic(small_data):
    a = cross_validate(small_data, 5, 2, seed=3)
    b = cross_validate(small_data, 5, 2, seed=3)
    assert a.to_json() == b.to_json()
    assert len(a.folds) == 10 and a.total.mw + a.total.gw == 2 * len(small_data)
    assert set(a.to_json()) >= {"DR", "FPR", "Precision", "F", "sigma", "total"}


def test_cross_validation_parallel_matches_serial(small_data):
    assert cross_validate(small_data, 5, 1, jobs=2).to_json() == cross_validate(small_data, 5, 1).to_json()


def test_smote_never_touches_the_test_fold(small_data):
    audits = []
    cross_validate(small_data, 5, 2, hook=audits.append)
    assert len(audits) == 10
    for a in audits:
        real_rows = a.train_rows[a.train_rows >= 0]
        assert not set(real_rows.tolist()) & set(a.test_rows.tolist())
        assert np.array_equal(np.sort(real_rows), a.train_idx)
        assert np.array_equal(a.test_rows, a.test_idx)


def test_cross_validation_needs_k_samples_per_class(small_data):
    with pytest.raises(ValueError):
        cross_validate(Dataset(small_data.X[:30], small_data.y[:30], [], [], []), 10, 1)


def test_ablate_graph_modes(small_corpus):
    g = labeled_graphs(small_corpus[:1])[0].graph
    assert ablate_graph(g, "real") is g
    assert all(e.size == 1 for e in ablate_graph(g, AblationMode.FIXED_ONE).edges.values())
    top = max(e.size for e in g.edges.values())
    r = ablate_graph(g, "random", np.random.default_rng(0))
    assert all(1 <= e.size <= top for e in r.edges.values())
    with pytest.raises(ValueError):
        ablate_graph(g, "random")


def test_real_ablation_reproduces_plain_cv(small_corpus, small_data):
    res = quantity_ablation(labeled_graphs(small_corpus), "real", seed=1, k=5, repeats=1)
    assert res.cv.to_json() == cross_validate(small_data, 5, 1, seed=1).to_json()
    assert res.fpr_ratio == 1.0 and res.fnr_ratio == 1.0


def test_leave_one_family_out(small_data):
    res = leave_one_family_out(small_data)
    assert {f.family for f in res.families} == {"downloader", "injector", "ransomware", "replicator"}
    assert all(0 <= f.dr <= 1 for f in res.families)
    only_one = Dataset(small_data.X, small_data.y, ["one"] * len(small_data), [], [])
    with pytest.raises(ValueError):
        leave_one_family_out(only_one)


def test_sweep_identity_config(small_corpus):
    train, test = small_corpus[::2], small_corpus[1::2]
    qdfg = train_qdfg([v for t in train for v in trace_features(t)])
    ngram = train_ngram(train, 2)
    rows = obfuscation_sweep(test, [ObfuscationConfig()], [qdfg, ngram])
    assert [r.classifier for r in rows] == ["qdfg", "ngram2"]
    assert all(r.mean_levenshtein == 0 for r in rows)
    mal = [t for t in test if t.label is Label.MALICIOUS]
    assert rows[0].detection_rate == sum(qdfg.is_malicious(t) for t in mal) / len(mal)
    buf = io.StringIO()
    write_sweep_csv(rows, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0].split(",") == SWEEP_HEADER and len(lines) == 3


def test_timing_profile_stages(small_corpus):
    det = train_qdfg([v for t in small_corpus for v in trace_features(t)], ClassifierConfig(seed=0))
    prof = timing_profile(mesh_trace(50), det.forest)
    assert prof.n_edges == 50
    parts = prof.build_ms + prof.local_ms + prof.global_ms + prof.classify_ms
    assert prof.total_ms == pytest.approx(parts, rel=1e-6)
    assert set(prof.to_json()) == {"build_ms", "local_ms", "global_ms", "classify_ms", "total_ms",
                                   "n_nodes", "n_edges"}


def test_timing_profile_empty_trace(small_corpus):
    det = train_qdfg([v for t in small_corpus for v in trace_features(t)], ClassifierConfig(seed=0))
    prof = timing_profile(TraceLog("empty"), det.forest)
    assert prof.n_nodes == 0
    assert max(prof.build_ms, prof.local_ms, prof.global_ms, prof.classify_ms) < 5
