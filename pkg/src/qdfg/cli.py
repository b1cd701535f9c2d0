"""Command-line frontend: ``qdfg <subcommand> ...``.

Every subcommand that writes a file also writes ``<out>.manifest.json``
recording the argument vector, seed and paths, and ``qdfg replay`` re-runs a
manifest to reproduce the output.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from . import graph as qgraph
from .detect import QdfgDetector, train_qdfg
from .evaluate import (
    AblationMode,
    Dataset,
    cross_validate,
    labeled_graphs,
    leave_one_family_out,
    obfuscation_sweep,
    quantity_ablation,
    timing_profile,
    write_sweep_csv,
)
from .features import (
    FEATURE_NAMES,
    FeatureConfig,
    FeatureVector,
    graph_features,
    read_feature_csv,
    trace_features,
    write_feature_csv,
)
from .forest import ClassifierConfig, RandomForest
from .ngram import NgramDetector, train_ngram
from .obfuscate import ObfuscationConfig, load_grid, obfuscate, obfuscation_grid
from .synth import default_corpus, generate_corpus, load_families, write_corpus
from .trace import Label, TraceLog, interpret_log, read_trace, write_trace

log = logging.getLogger("qdfg")

CONFIG_SECTIONS = ("classifier", "features", "obfuscation")


class CliError(Exception):
    """A user-facing failure: printed as a one-line diagnostic, exit status 1."""


@dataclass
class RunManifest:
    subcommand: str
    argv: list[str]
    inputs: list[str]
    output: str | None
    seed: int
    config: dict[str, Any] = field(default_factory=dict)
    version: str = __version__

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


# -- shared helpers -----------------------------------------------------------

def _load_config(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise CliError("config file must hold a JSON object")
    unknown = set(doc) - set(CONFIG_SECTIONS)
    if unknown:
        raise CliError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    return doc


def _classifier_config(args: argparse.Namespace) -> ClassifierConfig:
    d = dict(args.config_doc.get("classifier", {}))
    d["seed"] = args.seed
    if getattr(args, "trees", None) is not None:
        d["n_trees"] = args.trees
    return ClassifierConfig.from_dict(d)


def _feature_config(args: argparse.Namespace) -> FeatureConfig:
    d = dict(args.config_doc.get("features", {}))
    unknown = set(d) - {"attribute", "cost"}
    if unknown:
        raise CliError(f"unknown feature option(s): {', '.join(sorted(unknown))}")
    if d.get("cost", "size") not in (qgraph.SIZE_COST, qgraph.INVERSE_COST):
        raise CliError(f"unknown cost {d['cost']!r}")
    return FeatureConfig(**d)


def _trace_paths(paths: Sequence[str]) -> list[Path]:
    out: list[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(p.glob("*.jsonl")))
        elif p.exists():
            out.append(p)
        else:
            raise CliError(f"no such file or directory: {p}")
    return out


def _load_trace(path: Path) -> TraceLog:
    trace = read_trace(path)
    if not trace.sample_id:
        trace.sample_id = path.stem
    return trace


def _load_traces(paths: Sequence[str]) -> list[TraceLog]:
    traces = [_load_trace(p) for p in _trace_paths(paths)]
    if not traces:
        raise CliError("no traces found")
    return traces


def _corpus(args: argparse.Namespace) -> list[TraceLog]:
    """Traces from the positional inputs, or the built-in synthetic corpus."""
    if args.inputs:
        return _load_traces(args.inputs)
    log.info("no inputs given: using the default synthetic corpus (%d per family)", args.count)
    return default_corpus(args.count, args.seed)


def _vectors(args: argparse.Namespace) -> list[FeatureVector]:
    if len(args.inputs) == 1 and args.inputs[0].endswith(".csv"):
        with open(args.inputs[0], encoding="utf-8", newline="") as fh:
            return read_feature_csv(fh)[1]
    features = _feature_config(args)
    return [v for t in _corpus(args) for v in trace_features(t, features)]


def _trace_from_meta(meta: dict[str, Any], fallback: str) -> TraceLog:
    return TraceLog(
        meta.get("sample_id") or fallback,
        Label(meta.get("label") or "unknown"),
        meta.get("family"),
        [],
        frozenset(meta.get("background_pids", ())),
    )


def _load_model(path: str) -> QdfgDetector | NgramDetector:
    try:
        forest = RandomForest.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"model file not found: {path}") from None
    if forest.meta.get("kind") == "ngram":
        return NgramDetector.from_forest(forest)
    return QdfgDetector.from_forest(forest)


class _Output:
    """Writes to ``-o`` (plus a manifest) or to stdout."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.path = Path(args.out) if args.out else None

    def write_text(self, text: str) -> None:
        if self.path is None:
            sys.stdout.write(text)
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(text, encoding="utf-8")
        self.write_manifest()

    def write_manifest(self, path: Path | None = None) -> None:
        target = path or Path(f"{self.path}.manifest.json")
        target.write_text(json.dumps(_manifest(self.args).to_json(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def _manifest(args: argparse.Namespace) -> RunManifest:
    name = args.command if args.command != "evaluate" else f"evaluate {args.experiment}"
    return RunManifest(
        subcommand=name,
        argv=list(args.argv),
        inputs=list(getattr(args, "inputs", []) or []),
        output=args.out,
        seed=args.seed,
        config=args.config_doc,
    )


def _json_text(doc: Any) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# -- subcommands --------------------------------------------------------------

def cmd_build_graph(args: argparse.Namespace) -> None:
    path = _trace_paths([args.trace])[0]
    trace = _load_trace(path)
    g = qgraph.build_graph(interpret_log(trace))
    log.info("%s: %d nodes, %d edges", trace.sample_id, len(g), len(g.edges))
    if args.dot:
        _Output(args).write_text(qgraph.to_dot(g))
        return
    meta = trace.header()
    meta["seed"] = args.seed
    _Output(args).write_text(qgraph.dumps(g, meta) + "\n")


def cmd_extract_features(args: argparse.Namespace) -> None:
    features = _feature_config(args)
    vectors: list[FeatureVector] = []
    for path in _trace_paths(args.inputs):
        if path.suffix == ".json":
            g, meta = qgraph.loads(path.read_text(encoding="utf-8"))
            vectors.extend(graph_features(g, _trace_from_meta(meta, path.stem), features))
        else:
            vectors.extend(trace_features(_load_trace(path), features))
    buf = io.StringIO()
    write_feature_csv(vectors, buf, FEATURE_NAMES)
    _Output(args).write_text(buf.getvalue())


def cmd_train(args: argparse.Namespace) -> None:
    if not args.out:
        raise CliError("train needs -o/--out for the model file")
    config = _classifier_config(args)
    if args.ngram:
        detector: Any = train_ngram(_corpus(args), args.ngram, config, args.vocabulary)
    else:
        vectors = [v for v in _vectors(args) if v.label in (Label.BENIGN, Label.MALICIOUS)]
        if not vectors:
            raise CliError("no labelled feature vectors to train on")
        detector = train_qdfg(vectors, config, _feature_config(args), jobs=args.jobs)
    detector.forest.meta["seed"] = args.seed
    _Output(args).write_text(detector.forest.dumps() + "\n")


def cmd_classify(args: argparse.Namespace) -> None:
    detector = _load_model(args.model)
    lines: list[dict[str, Any]] = []
    for trace in _load_traces(args.inputs):
        if isinstance(detector, NgramDetector):
            score = detector.score(trace)
            label = Label.MALICIOUS if detector.is_malicious(trace) else Label.BENIGN
            lines.append({"sample_id": trace.sample_id, "node": trace.sample_id, "label": label.value,
                          "score": score})
        else:
            lines.extend(v.to_json() for v in detector.classify_trace(trace))
    if args.pretty:
        width = max((len(d["node"]) for d in lines), default=4)
        text = "".join(f"{d['sample_id']:<16} {d['node']:<{width}} {d['label']:<10} {d['score']:.3f}\n"
                       for d in lines)
    else:
        text = "".join(json.dumps(d, sort_keys=True) + "\n" for d in lines)
    _Output(args).write_text(text)


def cmd_synth(args: argparse.Namespace) -> None:
    families = load_families(args.families)
    if args.show_families:
        sys.stdout.write(_json_text({"families": [f.to_json() for f in families]}))
        return
    if not args.out:
        raise CliError("synth needs -o/--out for the corpus directory")
    traces = generate_corpus(families, args.count, args.seed)
    write_corpus(traces, args.out)
    _Output(args).write_manifest(Path(args.out) / "manifest.json")
    log.info("wrote %d traces to %s", len(traces), args.out)


def _obfuscation_config(args: argparse.Namespace) -> ObfuscationConfig:
    d = dict(args.config_doc.get("obfuscation", {}))
    for key in ("reorder_prob", "reorder_window", "inject_prob", "inject_max"):
        value = getattr(args, key)
        if value is not None:
            d[key] = value
    d["seed"] = args.seed
    return ObfuscationConfig.from_json(d)


def cmd_obfuscate(args: argparse.Namespace) -> None:
    if not args.out:
        raise CliError("obfuscate needs -o/--out for the output directory")
    cfg = _obfuscation_config(args)
    traces = [obfuscate(t, cfg) for t in _load_traces(args.inputs)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t in traces:
        write_trace(t, out / f"{t.sample_id}.jsonl")
    _Output(args).write_manifest(out / "manifest.json")


def _eval_cv(args: argparse.Namespace) -> dict[str, Any]:
    result = cross_validate(Dataset.from_vectors(_vectors(args)), args.k, args.repeats,
                            _classifier_config(args), args.seed, jobs=args.jobs)
    return result.to_json()


def _eval_ablation(args: argparse.Namespace) -> dict[str, Any]:
    result = quantity_ablation(labeled_graphs(_corpus(args)), AblationMode(args.mode), args.seed,
                               args.k, args.repeats, _classifier_config(args), _feature_config(args), args.jobs)
    return result.to_json()


def _eval_families(args: argparse.Namespace) -> dict[str, Any]:
    return leave_one_family_out(Dataset.from_vectors(_vectors(args)), _classifier_config(args), args.seed).to_json()


def _eval_sweep(args: argparse.Namespace) -> str:
    corpus = _corpus(args)
    if args.test:
        test = _load_traces(args.test)
    else:
        # hold out a share of every family, preserving corpus order
        rng = np.random.default_rng(args.seed)
        mask = rng.random(len(corpus)) < args.holdout
        test = [t for t, m in zip(corpus, mask) if m]
        corpus = [t for t, m in zip(corpus, mask) if not m]
    config = _classifier_config(args)
    features = _feature_config(args)
    detectors: list[Any] = [train_qdfg([v for t in corpus for v in trace_features(t, features)], config,
                                       features, jobs=args.jobs)]
    detectors += [train_ngram(corpus, n, config) for n in args.ngrams]
    if args.grid:
        grid = load_grid(args.grid)
    else:
        grid = obfuscation_grid(reorder_probs=(0.0, 0.25, 0.5, 1.0), reorder_windows=(2, 4, 8), seed=args.seed)
        grid += obfuscation_grid(inject_probs=(0.1, 0.2, 0.3, 0.45, 0.6, 0.8, 1.0),
                                 inject_maxes=(1, 2, 4), seed=args.seed)
    buf = io.StringIO()
    write_sweep_csv(obfuscation_sweep(test, grid, detectors), buf)
    return buf.getvalue()


def _eval_timing(args: argparse.Namespace) -> str:
    detector = _load_model(args.model)
    if not isinstance(detector, QdfgDetector):
        raise CliError("timing needs a graph-feature model")
    rows = []
    for trace in _load_traces(args.inputs):
        rows.append({"sample_id": trace.sample_id, **timing_profile(trace, detector.forest, detector.features).to_json()})
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def cmd_evaluate(args: argparse.Namespace) -> None:
    handlers = {
        "cv": _eval_cv,
        "ablation": _eval_ablation,
        "families": _eval_families,
        "obfuscation-sweep": _eval_sweep,
        "timing": _eval_timing,
    }
    result = handlers[args.experiment](args)
    if isinstance(result, dict):
        result["seed"] = args.seed
        result = _json_text(result)
    _Output(args).write_text(result)


def cmd_replay(args: argparse.Namespace) -> None:
    try:
        doc = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"manifest not found: {args.manifest}") from None
    argv = doc.get("argv")
    if not isinstance(argv, list) or not argv or argv[0] == "replay":
        raise CliError("manifest has no replayable argv")
    log.info("replaying: qdfg %s", " ".join(argv))
    status = main(argv)
    if status:
        raise CliError(f"replayed command exited with status {status}")


# -- parser -------------------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (results do not depend on it)")
    p.add_argument("--config", help="JSON file with classifier/features/obfuscation sections")
    p.add_argument("-o", "--out", help="output path (stdout when omitted)")
    return p


def _corpus_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("inputs", nargs="*", help="trace files or directories (default: synthetic corpus)")
    p.add_argument("--count", type=int, default=150, help="traces per family for the synthetic corpus")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="qdfg", description="Quantitative data flow graph malware detection.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("build-graph", parents=[common], help="trace -> graph JSON (or DOT)")
    p.add_argument("trace")
    p.add_argument("--dot", action="store_true", help="emit Graphviz DOT instead of JSON")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("extract-features", parents=[common], help="graphs or traces -> feature CSV")
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("train", parents=[common], help="train a detector model")
    _corpus_args(p)
    p.add_argument("--ngram", type=int, metavar="N", help="train the n-gram baseline instead")
    p.add_argument("--vocabulary", type=int, default=500, help="n-gram vocabulary size")
    p.add_argument("--trees", type=int, help="number of trees")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("classify", parents=[common], help="print per-process verdicts as JSON lines")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--model", required=True)
    p.add_argument("--pretty", action="store_true", help="human-readable table")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--families", help="family definition JSON (default: built-in families)")
    p.add_argument("--count", type=int, default=150, help="traces per family")
    p.add_argument("--show-families", action="store_true", help="print the family definitions and exit")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("obfuscate", parents=[common], help="reorder calls and inject bogus calls")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--reorder-prob", type=float)
    p.add_argument("--reorder-window", type=int)
    p.add_argument("--inject-prob", type=float)
    p.add_argument("--inject-max", type=int)
    p.set_defaults(func=cmd_obfuscate)

    p = sub.add_parser("evaluate", help="experimental protocols")
    ev = p.add_subparsers(dest="experiment", required=True, metavar="experiment")
    for name, text in (("cv", "repeated k-fold cross validation"), ("ablation", "quantity ablation"),
                       ("families", "leave-one-family-out")):
        e = ev.add_parser(name, parents=[common], help=text)
        _corpus_args(e)
        e.add_argument("--trees", type=int)
        if name != "families":
            e.add_argument("--k", type=int, default=10)
            e.add_argument("--repeats", type=int, default=10)
        if name == "ablation":
            e.add_argument("--mode", choices=[m.value for m in AblationMode], default="random")
        e.set_defaults(func=cmd_evaluate)
    e = ev.add_parser("obfuscation-sweep", parents=[common], help="detection rate under obfuscation")
    _corpus_args(e)
    e.add_argument("--test", nargs="+", help="held-out traces (default: random share of the corpus)")
    e.add_argument("--holdout", type=float, default=0.3)
    e.add_argument("--grid", help="JSON list of obfuscation configs")
    e.add_argument("--ngrams", type=int, nargs="*", default=[2, 3, 4, 5])
    e.add_argument("--trees", type=int)
    e.set_defaults(func=cmd_evaluate)
    e = ev.add_parser("timing", parents=[common], help="per-stage detection time")
    e.add_argument("inputs", nargs="+")
    e.add_argument("--model", required=True)
    e.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("replay", parents=[common], help="re-run a recorded manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=os.environ.get("QDFG_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    args.argv = argv
    try:
        args.config_doc = _load_config(args.config)
        if args.jobs < 1:
            raise CliError("--jobs must be >= 1")
        args.func(args)
    except (CliError, OSError, ValueError, KeyError) as exc:
        print(f"qdfg: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
