from __future__ import annotations

import json

import pytest

from qdfg import graph as qg
from qdfg.cli import main
from qdfg.synth import default_corpus, write_corpus


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    write_corpus(default_corpus(12, 0), out)
    return out


@pytest.fixture(scope="module")
def model(corpus_dir, tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "model.json"
    assert main(["train", str(corpus_dir), "-o", str(path), "--trees", "5"]) == 0
    return path


def test_synth_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["synth", "--count", "2", "--seed", "4", "-o", str(a)]) == 0
    assert main(["synth", "--count", "2", "--seed", "4", "-o", str(b)]) == 0
    files = sorted(p.name for p in a.glob("*.jsonl"))
    assert len(files) == 12
    assert all((a / f).read_bytes() == (b / f).read_bytes() for f in files)
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["subcommand"] == "synth" and manifest["seed"] == 4


def test_show_families(capsys):
    assert main(["synth", "--show-families"]) == 0
    assert len(json.loads(capsys.readouterr().out)["families"]) == 6


def test_build_graph_json_and_dot(corpus_dir, tmp_path):
    trace = sorted(corpus_dir.glob("*.jsonl"))[0]
    out = tmp_path / "g.json"
    assert main(["build-graph", str(trace), "-o", str(out)]) == 0
    g, meta = qg.loads(out.read_text())
    assert len(g.edges) > 0 and meta["sample_id"] == trace.stem
    assert (tmp_path / "g.json.manifest.json").exists()
    dot = tmp_path / "g.dot"
    assert main(["build-graph", str(trace), "--dot", "-o", str(dot)]) == 0
    assert dot.read_text().startswith("digraph")


def test_extract_features_from_traces_and_graphs(corpus_dir, tmp_path):
    trace = sorted(corpus_dir.glob("*.jsonl"))[0]
    graph = tmp_path / "g.json"
    main(["build-graph", str(trace), "-o", str(graph)])
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["extract-features", str(trace), "-o", str(a)]) == 0
    assert main(["extract-features", str(graph), "-o", str(b)]) == 0
    assert a.read_text() == b.read_text()
    assert a.read_text().splitlines()[0].startswith("sample_id,node,phi1")


def test_classify_prints_json_lines(corpus_dir, model, capsys):
    traces = sorted(corpus_dir.glob("*.jsonl"))[:3]
    assert main(["classify", "--model", str(model), *map(str, traces)]) == 0
    rows = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert rows and {"sample_id", "node", "label", "score"} == set(rows[0])
    assert {r["sample_id"] for r in rows} == {t.stem for t in traces}


def test_ngram_model_classifies(corpus_dir, tmp_path, capsys):
    path = tmp_path / "ngram.json"
    assert main(["train", str(corpus_dir), "--ngram", "3", "--trees", "5", "-o", str(path)]) == 0
    trace = sorted(corpus_dir.glob("*.jsonl"))[0]
    assert main(["classify", "--model", str(path), str(trace)]) == 0
    assert json.loads(capsys.readouterr().out)["label"] in ("benign", "malicious")


def test_obfuscate_writes_corpus(corpus_dir, tmp_path):
    out = tmp_path / "obf"
    src = sorted(corpus_dir.glob("*.jsonl"))[:2]
    assert main(["obfuscate", *map(str, src), "--inject-prob", "0.5", "-o", str(out)]) == 0
    assert len(list(out.glob("*.jsonl"))) == 2


def test_evaluate_cv_and_replay(corpus_dir, tmp_path):
    out = tmp_path / "cv.json"
    argv = ["evaluate", "cv", str(corpus_dir), "--k", "3", "--repeats", "1", "--trees", "3", "-o", str(out)]
    assert main(argv) == 0
    first = out.read_text()
    doc = json.loads(first)
    assert {"DR", "FPR", "Precision", "F", "sigma", "seed"} <= set(doc)
    out.unlink()
    assert main(["replay", str(tmp_path / "cv.json.manifest.json")]) == 0
    assert out.read_text() == first


def test_evaluate_timing(corpus_dir, model, capsys):
    trace = sorted(corpus_dir.glob("*.jsonl"))[0]
    assert main(["evaluate", "timing", str(trace), "--model", str(model)]) == 0
    row = json.loads(capsys.readouterr().out)
    assert row["total_ms"] >= 0 and row["n_edges"] > 0


def test_errors_exit_nonzero(tmp_path, capsys):
    assert main(["build-graph", str(tmp_path / "missing.jsonl")]) == 1
    assert capsys.readouterr().err.startswith("qdfg: error:")
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"ts": 1, "pid": 1, "process": "p"}\n')
    assert main(["build-graph", str(bad)]) == 1
    assert "line 1" in capsys.readouterr().err
    assert main(["train", str(tmp_path)]) == 1
    with pytest.raises(SystemExit) as info:
        main(["no-such-command"])
    assert info.value.code == 2
