"""Experimental protocols: repeated stratified k-fold CV, quantity ablation,
leave-one-family-out, obfuscation sweeps and per-stage timing."""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import IO, Any, Callable, Iterable, Protocol, Sequence

import numpy as np

from .features import (
    FeatureConfig,
    FeatureVector,
    graph_features,
    local_features,
    process_global_features,
)
from .forest import BENIGN, MALICIOUS, ClassifierConfig, RandomForest, encode_labels, smote, train_forest
from .graph import QDFG, build_graph, with_sizes
from .obfuscate import ObfuscationConfig, levenshtein, obfuscate
from .stats import welch_t_test
from .trace import Label, TraceLog, interpret_log

METRIC_NAMES = ("dr", "fpr", "precision", "f_measure")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def mw(self) -> int:
        return self.tp + self.fn

    @property
    def gw(self) -> int:
        return self.tn + self.fp

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)

    @classmethod
    def from_predictions(cls, y_true: np.ndarray, y_pred: np.ndarray) -> "ConfusionCounts":
        y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
        mal, ben = y_true == MALICIOUS, y_true == BENIGN
        return cls(
            tp=int(np.sum(mal & (y_pred == MALICIOUS))),
            tn=int(np.sum(ben & (y_pred == BENIGN))),
            fp=int(np.sum(ben & (y_pred == MALICIOUS))),
            fn=int(np.sum(mal & (y_pred == BENIGN))),
        )


@dataclass(frozen=True)
class QualityMetrics:
    dr: float
    fpr: float
    precision: float
    f_measure: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def quality_metrics(c: ConfusionCounts) -> QualityMetrics:
    if c.mw == 0 or c.gw == 0:
        raise ValueError("need at least one malware and one goodware sample")
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 1.0
    return QualityMetrics(
        dr=c.tp / c.mw,
        fpr=c.fp / c.gw,
        precision=precision,
        f_measure=2 * c.tp / (2 * c.tp + c.fp + c.fn),
    )


def degradation_ratio(rate: float, baseline: float) -> float:
    """How many times ``rate`` exceeds ``baseline`` (e.g. FPR_fixed / FPR_real)."""
    if baseline == 0:
        return 1.0 if rate == 0 else math.inf
    return rate / baseline


# -- datasets -------------------------------------------------------------------

@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    families: list[str | None]
    sample_ids: list[str]
    nodes: list[str]

    @classmethod
    def from_vectors(cls, vectors: Sequence[FeatureVector]) -> "Dataset":
        labelled = [v for v in vectors if v.label in (Label.BENIGN, Label.MALICIOUS)]
        if not labelled:
            raise ValueError("no labelled feature vectors")
        X = np.asarray([v.values for v in labelled], dtype=float)
        y = encode_labels([v.label for v in labelled])
        return cls(X, y, [v.family for v in labelled], [v.sample_id for v in labelled], [v.node for v in labelled])

    def __len__(self) -> int:
        return len(self.y)


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def stratified_folds(y: np.ndarray, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Test-index arrays of ``k`` folds, each class spread evenly over folds."""
    folds: list[list[int]] = [[] for _ in range(k)]
    for cls in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == cls))
        for f, chunk in enumerate(np.array_split(idx, k)):
            folds[f].extend(chunk.tolist())
    return [np.sort(np.asarray(f, dtype=np.int64)) for f in folds]


@dataclass
class FoldAudit:
    """What a fold trained and tested on; row ids of -1 are synthetic samples."""

    repeat: int
    fold: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    train_rows: np.ndarray
    test_rows: np.ndarray


@dataclass
class FoldResult:
    repeat: int
    fold: int
    counts: ConfusionCounts
    metrics: QualityMetrics
    n_synthetic: int


@dataclass
class CVResult:
    mean: QualityMetrics
    std: QualityMetrics
    folds: list[FoldResult]
    total: ConfusionCounts
    k: int
    repeats: int
    seed: int

    def to_json(self) -> dict[str, Any]:
        def keyed(m: QualityMetrics) -> dict[str, float]:
            return {"DR": m.dr, "FPR": m.fpr, "Precision": m.precision, "F": m.f_measure}

        return {
            **keyed(self.mean),
            "sigma": keyed(self.std),
            "total": asdict(self.total),
            "k": self.k,
            "repeats": self.repeats,
            "seed": self.seed,
        }

    def rates(self, name: str) -> list[float]:
        return [getattr(f.metrics, name) for f in self.folds]


def _summarize(results: list[FoldResult]) -> tuple[QualityMetrics, QualityMetrics]:
    arr = np.asarray([[getattr(r.metrics, m) for m in METRIC_NAMES] for r in results])
    mean = arr.mean(axis=0)
    std = arr.std(axis=0, ddof=1) if len(arr) > 1 else np.zeros(len(METRIC_NAMES))
    return QualityMetrics(*map(float, mean)), QualityMetrics(*map(float, std))


def _run_fold(args: tuple) -> tuple[FoldResult, np.ndarray, np.ndarray]:
    X, y, train_idx, test_idx, config, repeat, fold, seed = args
    fold_seed = _derive_seed(seed, repeat, fold)
    Xtr, ytr = smote(X[train_idx], y[train_idx], config.smote_ratio, config.smote_k, seed=fold_seed)
    n_syn = len(ytr) - len(train_idx)
    forest = train_forest(Xtr, ytr, replace(config, seed=fold_seed))
    pred = forest.predict(X[test_idx])
    counts = ConfusionCounts.from_predictions(y[test_idx], pred)
    train_rows = np.concatenate([train_idx, np.full(n_syn, -1, dtype=np.int64)])
    return FoldResult(repeat, fold, counts, quality_metrics(counts), n_syn), train_rows, test_idx


def cross_validate(
    data: Dataset,
    k: int = 10,
    repeats: int = 10,
    config: ClassifierConfig = ClassifierConfig(),
    seed: int = 0,
    hook: Callable[[FoldAudit], None] | None = None,
    jobs: int = 1,
) -> CVResult:
    """Repeated stratified k-fold CV; SMOTE is applied to each training portion only."""
    for cls in (BENIGN, MALICIOUS):
        n = int(np.sum(data.y == cls))
        if n < k:
            raise ValueError(f"class {cls} has {n} samples, fewer than k={k}")
    work = []
    for r in range(repeats):
        rng = np.random.default_rng(_derive_seed(seed, r))
        for f, test_idx in enumerate(stratified_folds(data.y, k, rng)):
            train_idx = np.setdiff1d(np.arange(len(data)), test_idx)
            work.append((data.X, data.y, train_idx, test_idx, config, r, f, seed))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(_run_fold, work))
    else:
        outputs = [_run_fold(w) for w in work]
    results = []
    for w, (res, train_rows, test_rows) in zip(work, outputs):
        if hook is not None:
            hook(FoldAudit(res.repeat, res.fold, w[2], w[3], train_rows, test_rows))
        results.append(res)
    results.sort(key=lambda r: (r.repeat, r.fold))
    mean, std = _summarize(results)
    total = sum((r.counts for r in results), ConfusionCounts())
    return CVResult(mean, std, results, total, k, repeats, seed)


# -- quantity ablation --------------------------------------------------------

class AblationMode(str, Enum):
    REAL = "real"
    FIXED_ONE = "fixed_one"
    RANDOM = "random"


@dataclass
class LabeledGraph:
    graph: QDFG
    trace: TraceLog


def labeled_graphs(traces: Iterable[TraceLog]) -> list[LabeledGraph]:
    return [LabeledGraph(build_graph(interpret_log(t)), t) for t in traces]


def ablate_graph(g: QDFG, mode: AblationMode | str, rng: np.random.Generator | None = None) -> QDFG:
    mode = AblationMode(mode)
    if mode is AblationMode.REAL:
        return g
    if mode is AblationMode.FIXED_ONE:
        return with_sizes(g, lambda s, d, e: 1)
    if rng is None:
        raise ValueError("random ablation needs a generator")
    top = max((e.size for e in g.edges.values()), default=1)
    # draw in sorted edge order so the result does not depend on insertion order
    draws = dict(zip(sorted(g.edges), rng.integers(1, top + 1, size=len(g.edges)).tolist()))
    return with_sizes(g, lambda s, d, e: draws[(s, d)])


def ablation_features(
    graphs: Sequence[LabeledGraph],
    mode: AblationMode | str,
    seed: int = 0,
    config: FeatureConfig = FeatureConfig(),
) -> list[FeatureVector]:
    vectors = []
    for i, lg in enumerate(graphs):
        rng = np.random.default_rng(_derive_seed(seed, i))
        vectors.extend(graph_features(ablate_graph(lg.graph, mode, rng), lg.trace, config))
    return vectors


@dataclass
class AblationResult:
    mode: AblationMode
    cv: CVResult
    real: CVResult
    fpr_ratio: float
    fnr_ratio: float
    dr_p_value: float | None
    fpr_p_value: float | None

    def to_json(self) -> dict[str, Any]:
        def finite(x: float | None) -> float | None:
            return x if x is not None and math.isfinite(x) else None

        return {
            "mode": self.mode.value,
            "metrics": self.cv.to_json(),
            "real": self.real.to_json(),
            "fpr_ratio": finite(self.fpr_ratio),
            "fnr_ratio": finite(self.fnr_ratio),
            "dr_p_value": finite(self.dr_p_value),
            "fpr_p_value": finite(self.fpr_p_value),
        }


def _p_value(a: list[float], b: list[float]) -> float | None:
    if len(a) < 2 or len(b) < 2:
        return None
    return welch_t_test(a, b)


def quantity_ablation(
    graphs: Sequence[LabeledGraph],
    mode: AblationMode | str,
    seed: int = 0,
    k: int = 10,
    repeats: int = 10,
    config: ClassifierConfig = ClassifierConfig(),
    features: FeatureConfig = FeatureConfig(),
    jobs: int = 1,
) -> AblationResult:
    """Rewrite edge quantities per ``mode``, re-extract features and cross-validate.

    The real-quantity run uses the same seed, so ``mode="real"`` reproduces
    plain :func:`cross_validate` exactly.
    """
    mode = AblationMode(mode)
    real = cross_validate(Dataset.from_vectors(ablation_features(graphs, AblationMode.REAL, seed, features)),
                          k, repeats, config, seed, jobs=jobs)
    if mode is AblationMode.REAL:
        cv = real
    else:
        cv = cross_validate(Dataset.from_vectors(ablation_features(graphs, mode, seed, features)),
                            k, repeats, config, seed, jobs=jobs)
    return AblationResult(
        mode,
        cv,
        real,
        degradation_ratio(cv.mean.fpr, real.mean.fpr),
        degradation_ratio(1 - cv.mean.dr, 1 - real.mean.dr),
        _p_value(cv.rates("dr"), real.rates("dr")),
        _p_value(cv.rates("fpr"), real.rates("fpr")),
    )


# -- leave one family out -----------------------------------------------------

@dataclass
class FamilyResult:
    family: str
    n: int
    detected: int

    @property
    def dr(self) -> float:
        return self.detected / self.n


@dataclass
class LofoResult:
    families: list[FamilyResult]

    @property
    def mean_dr(self) -> float:
        return float(np.mean([f.dr for f in self.families]))

    def to_json(self) -> dict[str, Any]:
        return {
            "mean_dr": self.mean_dr,
            "families": [{"family": f.family, "n": f.n, "detected": f.detected, "dr": f.dr} for f in self.families],
        }


def leave_one_family_out(
    data: Dataset,
    config: ClassifierConfig = ClassifierConfig(),
    seed: int = 0,
) -> LofoResult:
    fam = np.asarray([f or "" for f in data.families], dtype=object)
    malware_families = sorted({f for f, y in zip(fam, data.y) if y == MALICIOUS and f})
    if len(malware_families) < 2:
        raise ValueError("leave-one-family-out needs at least 2 malware families")
    results = []
    for i, family in enumerate(malware_families):
        test = (fam == family) & (data.y == MALICIOUS)
        train = ~test & ((data.y == BENIGN) | (fam != family))
        fold_seed = _derive_seed(seed, i)
        Xtr, ytr = smote(data.X[train], data.y[train], config.smote_ratio, config.smote_k, seed=fold_seed)
        forest = train_forest(Xtr, ytr, replace(config, seed=fold_seed))
        pred = forest.predict(data.X[test])
        results.append(FamilyResult(family, int(test.sum()), int(pred.sum())))
    return LofoResult(results)


# -- obfuscation sweep --------------------------------------------------------

class TraceDetector(Protocol):
    name: str

    def is_malicious(self, trace: TraceLog) -> bool: ...


@dataclass
class SweepRow:
    config_id: int
    config: ObfuscationConfig
    mean_levenshtein: float
    classifier: str
    detection_rate: float
    false_positive_rate: float | None

    def to_csv(self) -> list[Any]:
        c = self.config
        return [self.config_id, c.reorder_prob, c.reorder_window, c.inject_prob, c.inject_max,
                repr(self.mean_levenshtein), self.classifier, repr(self.detection_rate),
                "" if self.false_positive_rate is None else repr(self.false_positive_rate)]


SWEEP_HEADER = ["config_id", "reorder_prob", "reorder_window", "inject_prob", "inject_max",
                "mean_levenshtein", "classifier", "detection_rate", "false_positive_rate"]


def obfuscation_sweep(
    baseline: Sequence[TraceLog],
    grid: Sequence[ObfuscationConfig],
    detectors: Sequence[TraceDetector],
) -> list[SweepRow]:
    """Obfuscate every baseline trace per config and re-run every detector."""
    malicious = [t for t in baseline if t.label is Label.MALICIOUS]
    benign = [t for t in baseline if t.label is Label.BENIGN]
    if not malicious:
        raise ValueError("sweep needs malicious baseline traces")
    rows = []
    for cid, cfg in enumerate(grid):
        obf_mal = [obfuscate(t, cfg) for t in malicious]
        obf_ben = [obfuscate(t, cfg) for t in benign]
        dist = [levenshtein(a.calls(True), b.calls(True))
                for a, b in zip([*malicious, *benign], [*obf_mal, *obf_ben])]
        mean_lev = float(np.mean(dist))
        for det in detectors:
            dr = sum(det.is_malicious(t) for t in obf_mal) / len(obf_mal)
            fpr = sum(det.is_malicious(t) for t in obf_ben) / len(obf_ben) if obf_ben else None
            rows.append(SweepRow(cid, cfg, mean_lev, det.name, dr, fpr))
    return rows


def write_sweep_csv(rows: Iterable[SweepRow], stream: IO[str]) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow(r.to_csv())


# -- timing -------------------------------------------------------------------

@dataclass
class TimingProfile:
    build_ms: float
    local_ms: float
    global_ms: float
    classify_ms: float
    total_ms: float
    n_nodes: int
    n_edges: int
    stages: tuple[str, ...] = field(default=("build", "local", "global", "classify"), repr=False)

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d.pop("stages")
        return d


def timing_profile(
    trace: TraceLog,
    forest: RandomForest,
    config: FeatureConfig = FeatureConfig(),
) -> TimingProfile:
    """Wall-clock milliseconds per detection stage for one trace."""
    clock = time.perf_counter
    t0 = clock()
    g = build_graph(interpret_log(trace))
    t1 = clock()
    procs = g.process_nodes()
    # a node's out-edges are identical in g and in its reachability graph
    local = [local_features(p, g, config) for p in procs]
    t2 = clock()
    glob = process_global_features(g, config)
    t3 = clock()
    if procs:
        forest.predict(np.asarray([lv + glob[p] for p, lv in zip(procs, local)]))
    t4 = clock()
    ms = 1000.0
    return TimingProfile((t1 - t0) * ms, (t2 - t1) * ms, (t3 - t2) * ms, (t4 - t3) * ms, (t4 - t0) * ms,
                         len(g), len(g.edges))
