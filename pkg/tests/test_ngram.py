from __future__ import annotations

from collections import Counter

import numpy as np
import pytest

from qdfg.ngram import NgramDetector, build_vocabulary, gram_key, ngram_profile, train_ngram, vectorize
from qdfg.trace import Label


def test_profile_examples():
    assert ngram_profile(list("aba"), 2) == Counter({"a|b": 2})
    assert ngram_profile(list("aaa"), 2) == Counter({"a|a": 2})
    assert ngram_profile(["a"], 2) == Counter()
    with pytest.raises(ValueError):
        ngram_profile(["a"], 0)


def test_gram_is_order_free_within_window_only():
    assert gram_key(["b", "a", "c"]) == gram_key(["c", "b", "a"]) == "a|b|c"
    # reordering across windows changes the profile
    assert ngram_profile(list("abcd"), 2) != ngram_profile(list("acbd"), 2)


def test_vectorize_examples():
    assert vectorize(Counter({"a|b": 2}), ["a|b", "b|c"]) == [1.0, 0.0]
    assert vectorize(Counter(), ["a|b", "b|c"]) == [0.0, 0.0]
    assert vectorize(Counter({"a|b": 1, "b|c": 3}), ["a|b", "b|c"]) == [0.25, 0.75]


def test_injected_unknown_call_dilutes_every_component():
    vocab = ["a|b", "b|c"]
    before = vectorize(ngram_profile(list("abc"), 2), vocab)
    after = vectorize(ngram_profile(list("abcz"), 2), vocab)
    assert all(x > y for x, y in zip(before, after))


def test_vocabulary_top_k_with_stable_ties():
    profiles = [Counter({"x": 3, "a": 1, "b": 1}), Counter({"b": 1, "c": 2})]
    assert build_vocabulary(profiles, 3) == ["x", "b", "c"]


def test_train_and_classify(small_corpus):
    det = train_ngram(small_corpus, 3)
    assert det.name == "ngram3" and len(det.vocabulary) <= 500
    hits = [det.is_malicious(t) == (t.label is Label.MALICIOUS) for t in small_corpus]
    assert np.mean(hits) > 0.95
    again = NgramDetector.from_forest(det.forest)
    assert again.n == 3 and again.vocabulary == det.vocabulary
    assert all(again.score(t) == det.score(t) for t in small_corpus[:10])
