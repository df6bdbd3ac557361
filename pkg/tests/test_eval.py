import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nam2speech import eval as ev

from .oracles import levenshtein_recursive

words = st.lists(st.sampled_from("abcd"), max_size=6)


def test_identical_is_zero():
    c = ev.edit_distance("a b c".split(), "a b c".split())
    assert c == ev.EditCounts(0, 0, 0, 0)


def test_single_substitution():
    c = ev.edit_distance("a b c".split(), "a x c".split())
    assert (c.distance, c.substitutions, c.insertions, c.deletions) == (1, 1, 0, 0)


def test_matches_recursive_definition():
    r = np.random.default_rng(0)
    for _ in range(300):
        a = list(r.choice(list("abc"), int(r.integers(0, 7))))
        b = list(r.choice(list("abc"), int(r.integers(0, 7))))
        c = ev.edit_distance(a, b)
        assert c.distance == levenshtein_recursive(a, b)
        assert c.substitutions + c.insertions + c.deletions == c.distance


@settings(max_examples=200, deadline=None)
@given(words, words, words)
def test_metric_properties(a, b, c):
    d = lambda x, y: ev.edit_distance(x, y).distance  # noqa: E731
    assert d(a, b) == d(b, a)
    assert d(a, c) <= d(a, b) + d(b, c)
    assert d(a, a) == 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["x", "y", "zz"]), min_size=1, max_size=8))
def test_wer_of_self_is_zero(ws):
    s = " ".join(ws)
    assert ev.wer(s, s) == 0.0 and ev.cer(s, s) == 0.0


def test_wer_examples():
    ref = "one two three four"
    assert ev.wer(ref, "") == 100.0
    assert ev.wer(ref, ref + " a b c d e f g h") == 200.0
    assert ev.wer(ref, "one two three fore") == 25.0


def test_normalization():
    assert ev.normalize("  Hello,   World! ") == "hello world"
    assert ev.wer("Hello, world.", "hello world") == 0.0


def test_empty_reference_rejected():
    with pytest.raises(ValueError):
        ev.wer("", "a")
    with pytest.raises(ValueError):
        ev.cer("  ...  ", "a")


def test_cer_counts_characters():
    assert ev.cer("abcd", "abed") == 25.0


def test_corpus_scores_pool_edits():
    s = ev.corpus_scores([("a b", "a"), ("c d e f", "c d e f")])
    assert s["wer"] == pytest.approx(100 / 6) and s["n"] == 2
    assert ev.corpus_scores([])["n"] == 0


# ---- toy recogniser ------------------------------------------------------------------------


def test_collapse_runs():
    assert ev.collapse_runs([1, 1, 2, 2, 2, 1]) == [1, 2, 1]
    assert ev.collapse_runs([1, 1, 2, 1, 1], min_run=2) == [1]
    assert ev.collapse_runs([3, 3, 4, 3, 3, 5, 5], min_run=2) == [3, 5]
    assert ev.collapse_runs([]) == []


def test_unit_recognizer_majority_labels():
    centroids = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    frames = np.array([[0.1, 0], [0.2, 0], [9.9, 0], [10.1, 0], [10.0, 0.1]])
    labels = np.array([4, 4, 7, 7, 2])
    rec = ev.UnitRecognizer.fit(centroids, frames, labels, min_run=1)
    # unit 2 is never hit and falls back to the most common label (ties go to the lowest)
    assert rec.unit_labels.tolist() == [4, 7, 4]
    seq = np.array([[0, 0], [0, 0], [10, 0], [10, 0], [0, 0]], dtype=float)
    assert rec.transcribe_ids(seq) == [4, 7, 4]
    assert rec.transcribe(seq) == "p4 p7 p4"
