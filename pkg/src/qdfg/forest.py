"""Random forest of Gini-split decision trees, plus SMOTE oversampling.

Labels are encoded 0 = benign, 1 = malicious. Training is deterministic for a
given (samples, config): samples are put in a canonical order first, and each
tree draws its bootstrap and feature subsets from its own seed substream, so
results do not depend on input order or on how many workers train trees.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from .trace import Label

BENIGN, MALICIOUS = 0, 1
MODEL_FORMAT = "qdfg-forest"
MODEL_VERSION = 1


def encode_labels(labels: Sequence[Label | str]) -> np.ndarray:
    out = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        lab = Label(lab)
        if lab is Label.UNKNOWN:
            raise ValueError(f"sample {i} has no benign/malicious label")
        out[i] = MALICIOUS if lab is Label.MALICIOUS else BENIGN
    return out


@dataclass
class ClassifierConfig:
    n_trees: int = 10
    # None means ceil(sqrt(n_features))
    features_per_split: int | None = None
    min_leaf: int = 2
    max_depth: int | None = None
    smote_k: int = 5
    smote_ratio: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.smote_k < 1 or self.smote_ratio <= 0:
            raise ValueError("smote_k and smote_ratio must be positive")

    def split_features(self, n_features: int) -> int:
        m = self.features_per_split or math.ceil(math.sqrt(n_features))
        if not 1 <= m <= n_features:
            raise ValueError(f"features_per_split must lie in [1, {n_features}], got {m}")
        return m

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ClassifierConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown classifier option(s): {', '.join(sorted(unknown))}")
        return cls(**d)


# -- SMOTE --------------------------------------------------------------------

def smote(
    X: np.ndarray,
    y: np.ndarray,
    target_ratio: float = 1.0,
    k: int = 5,
    seed: int | np.random.SeedSequence = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Oversample the minority class until minority/majority >= ``target_ratio``.

    Originals come first and unchanged; synthetic rows are appended. Each
    synthetic row is ``x + u * (nn - x)`` for a random minority row ``x``, one
    of its ``k`` nearest minority neighbours ``nn`` and ``u ~ U[0, 1)``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if k < 1:
        raise ValueError("k must be >= 1")
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        return X.copy(), y.copy()
    minority = classes[np.argmin(counts)]
    n_min, n_maj = counts.min(), counts.max()
    n_new = max(0, math.ceil(target_ratio * n_maj - 1e-9) - n_min)
    if n_new == 0:
        return X.copy(), y.copy()
    if n_min < 2:
        raise ValueError("SMOTE needs at least 2 minority samples")

    pool = X[y == minority]
    k_eff = min(k, n_min - 1)
    diff = pool[:, None, :] - pool[None, :, :]
    dist = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(dist, np.inf)
    neighbours = np.argsort(dist, axis=1, kind="stable")[:, :k_eff]

    rng = np.random.default_rng(seed)
    base = rng.integers(n_min, size=n_new)
    pick = neighbours[base, rng.integers(k_eff, size=n_new)]
    u = rng.random(n_new)[:, None]
    synth = pool[base] + u * (pool[pick] - pool[base])
    return np.vstack([X, synth]), np.concatenate([y, np.full(n_new, minority, dtype=y.dtype)])


# -- trees --------------------------------------------------------------------

@dataclass
class DecisionTree:
    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    counts: list[list[int]] = field(default_factory=list)

    def _new_node(self, counts: Sequence[int]) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.counts.append([int(c) for c in counts])
        return len(self.feature) - 1

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def leaf_counts(self, X: np.ndarray) -> np.ndarray:
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold)
        left, right = np.asarray(self.left), np.asarray(self.right)
        pos = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        active = feature[pos] >= 0
        while active.any():
            idx = rows[active]
            f = feature[pos[idx]]
            go_left = X[idx, f] <= threshold[pos[idx]]
            pos[idx] = np.where(go_left, left[pos[idx]], right[pos[idx]])
            active = feature[pos] >= 0
        return np.asarray(self.counts)[pos]

    def predict(self, X: np.ndarray) -> np.ndarray:
        """0/1 vote per row; equal leaf counts vote benign."""
        c = self.leaf_counts(np.asarray(X, dtype=float))
        return (c[:, MALICIOUS] > c[:, BENIGN]).astype(np.int64)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DecisionTree":
        t = cls(list(d["feature"]), [float(x) for x in d["threshold"]], list(d["left"]),
                list(d["right"]), [list(c) for c in d["counts"]])
        n = t.n_nodes
        if n == 0 or not all(len(getattr(t, a)) == n for a in ("threshold", "left", "right", "counts")):
            raise ValueError("malformed tree")
        return t


def _gini(pos: np.ndarray, n: np.ndarray) -> np.ndarray:
    p = pos / n
    return 2.0 * p * (1.0 - p)


def _best_split(x: np.ndarray, y: np.ndarray, min_leaf: int) -> tuple[float, float] | None:
    """Best (impurity decrease, threshold) on one feature, or None if unsplittable."""
    n = len(x)
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    cum = np.cumsum(ys)
    # split after position i-1, i.e. left = xs[:i]
    i = np.arange(min_leaf, n - min_leaf + 1)
    if len(i) == 0:
        return None
    # min_leaf >= 1 keeps i <= n - 1; only cut between distinct values
    i = i[xs[i - 1] < xs[i]]
    if len(i) == 0:
        return None
    total_pos = cum[-1]
    left_pos = cum[i - 1]
    nl, nr = i.astype(float), (n - i).astype(float)
    child = (nl * _gini(left_pos, nl) + nr * _gini(total_pos - left_pos, nr)) / n
    parent = _gini(np.array([total_pos]), np.array([float(n)]))[0]
    j = int(np.argmax(parent - child))
    cut = i[j]
    lo, hi = xs[cut - 1], xs[cut]
    thr = (lo + hi) / 2.0
    if not lo <= thr < hi:
        thr = lo
    return float(parent - child[j]), float(thr)


def grow_tree(
    X: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator,
    features_per_split: int,
    min_leaf: int = 2,
    max_depth: int | None = None,
) -> DecisionTree:
    tree = DecisionTree()
    n_features = X.shape[1]
    root = tree._new_node(np.bincount(y, minlength=2))
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        counts = tree.counts[node]
        if min(counts) == 0 or len(idx) < 2 * min_leaf:
            continue
        if max_depth is not None and depth >= max_depth:
            continue
        order = rng.permutation(n_features)
        best: tuple[float, int, float] | None = None
        # draw the random subset first; fall back to the remaining features
        # only if none of the drawn ones can split this node
        for start, stop in ((0, features_per_split), (features_per_split, n_features)):
            for f in order[start:stop]:
                found = _best_split(X[idx, f], y[idx], min_leaf)
                if found is not None and (best is None or found[0] > best[0]):
                    best = (found[0], int(f), found[1])
            if best is not None:
                break
        if best is None:
            continue
        _, f, thr = best
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        tree.feature[node] = f
        tree.threshold[node] = thr
        tree.left[node] = tree._new_node(np.bincount(y[li], minlength=2))
        tree.right[node] = tree._new_node(np.bincount(y[ri], minlength=2))
        stack.append((tree.right[node], ri, depth + 1))
        stack.append((tree.left[node], li, depth + 1))
    return tree


# -- forest -------------------------------------------------------------------

@dataclass
class RandomForest:
    trees: list[DecisionTree]
    n_features: int
    config: ClassifierConfig
    meta: dict[str, Any] = field(default_factory=dict)

    def votes(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        if not np.all(np.isfinite(X)):
            raise ValueError("feature values must be finite")
        return np.sum([t.predict(X) for t in self.trees], axis=0)

    def scores(self, X: np.ndarray) -> np.ndarray:
        """Fraction of trees voting malicious, per row."""
        return self.votes(X) / len(self.trees)

    def predict(self, X: np.ndarray) -> np.ndarray:
        # ties (score exactly 0.5) go to benign
        return (2 * self.votes(X) > len(self.trees)).astype(np.int64)

    def to_json(self) -> dict[str, Any]:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "n_features": self.n_features,
            "config": asdict(self.config),
            "meta": self.meta,
            "trees": [t.to_dict() for t in self.trees],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "RandomForest":
        if doc.get("format") != MODEL_FORMAT:
            raise ValueError("not a forest model document")
        if doc.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {doc.get('version')!r}")
        trees = [DecisionTree.from_dict(t) for t in doc["trees"]]
        if not trees:
            raise ValueError("model has no trees")
        return cls(trees, int(doc["n_features"]), ClassifierConfig.from_dict(doc["config"]), doc.get("meta", {}))

    @classmethod
    def loads(cls, text: str) -> "RandomForest":
        return cls.from_json(json.loads(text))


def canonical_order(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row permutation sorting samples by (features..., label)."""
    keys = [y] + [X[:, j] for j in reversed(range(X.shape[1]))]
    return np.lexsort(keys)


def _fit_one(args: tuple) -> DecisionTree:
    X, y, seq, fps, min_leaf, max_depth = args
    rng = np.random.default_rng(seq)
    boot = rng.integers(len(y), size=len(y))
    return grow_tree(X[boot], y[boot], rng, fps, min_leaf, max_depth)


def train_forest(
    X: np.ndarray,
    y: np.ndarray,
    config: ClassifierConfig = ClassifierConfig(),
    jobs: int = 1,
    meta: dict[str, Any] | None = None,
) -> RandomForest:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise ValueError("X must be 2-D with one row per label")
    if not np.all(np.isfinite(X)):
        raise ValueError("feature values must be finite")
    if len(np.unique(y)) < 2:
        raise ValueError("training data must contain both classes")
    fps = config.split_features(X.shape[1])
    order = canonical_order(X, y)
    X, y = X[order], y[order]
    seqs = np.random.SeedSequence(config.seed).spawn(config.n_trees)
    work = [(X, y, s, fps, config.min_leaf, config.max_depth) for s in seqs]
    if jobs > 1 and config.n_trees > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            trees = list(pool.map(_fit_one, work))
    else:
        trees = [_fit_one(w) for w in work]
    return RandomForest(trees, X.shape[1], config, dict(meta or {}))


def classify(forest: RandomForest, values: Sequence[float]) -> tuple[Label, float]:
    """Verdict and malicious-vote share for one feature vector."""
    if len(values) != forest.n_features:
        raise ValueError(f"expected {forest.n_features} features, got {len(values)}")
    votes = int(forest.votes(np.asarray([values], dtype=float))[0])
    score = votes / len(forest.trees)
    label = Label.MALICIOUS if 2 * votes > len(forest.trees) else Label.BENIGN
    return label, score
