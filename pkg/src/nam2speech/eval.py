"""Word and character error rates over normalised transcripts."""

from __future__ import annotations

import re
import string
from dataclasses import dataclass
from typing import Sequence

import numpy as np

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


@dataclass(frozen=True)
class EditCounts:
    distance: int
    substitutions: int
    insertions: int
    deletions: int


def normalize(text: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace."""
    return " ".join(_PUNCT.sub(" ", text.lower()).split())


def edit_distance(ref: Sequence, hyp: Sequence) -> EditCounts:
    """Levenshtein alignment of ``hyp`` against ``ref`` with operation counts.

    Among minimal alignments the backtrace prefers match/substitution, then
    deletion, then insertion, so the counts are deterministic.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            d[i][j] = min(d[i - 1][j - 1] + cost, d[i - 1][j] + 1, d[i][j - 1] + 1)
    i, j = n, m
    subs = ins = dels = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(d[n][m], subs, ins, dels)


def _rate(ref_tokens: list, hyp_tokens: list) -> float:
    if not ref_tokens:
        raise ValueError("reference transcript is empty")
    return 100.0 * edit_distance(ref_tokens, hyp_tokens).distance / len(ref_tokens)


def wer(ref: str, hyp: str) -> float:
    """Word error rate in percent; can exceed 100 when the hypothesis inserts words."""
    return _rate(normalize(ref).split(), normalize(hyp).split())


def cer(ref: str, hyp: str) -> float:
    """Character error rate in percent (spaces count as characters)."""
    return _rate(list(normalize(ref)), list(normalize(hyp)))


def corpus_scores(pairs: Sequence[tuple[str, str]]) -> dict:
    """Aggregate WER/CER: total edits over total reference length."""
    w_err = w_len = c_err = c_len = 0
    for ref, hyp in pairs:
        r, h = normalize(ref), normalize(hyp)
        if not r:
            raise ValueError("reference transcript is empty")
        w_err += edit_distance(r.split(), h.split()).distance
        w_len += len(r.split())
        c_err += edit_distance(list(r), list(h)).distance
        c_len += len(r)
    if not pairs:
        return {"wer": None, "cer": None, "n": 0}
    return {"wer": 100.0 * w_err / w_len, "cer": 100.0 * c_err / c_len, "n": len(pairs)}


def collapse_runs(labels: Sequence[int], min_run: int = 1) -> list[int]:
    """Merge repeated labels into one token, ignoring runs shorter than ``min_run``."""
    out: list[int] = []
    i = 0
    labels = list(labels)
    while i < len(labels):
        j = i
        while j < len(labels) and labels[j] == labels[i]:
            j += 1
        if j - i >= min_run and (not out or out[-1] != labels[i]):
            out.append(int(labels[i]))
        i = j
    return out


class UnitRecognizer:
    """Toy recogniser: nearest speech unit per frame -> majority phoneme -> collapsed runs.

    Stands in for an external ASR so that converted speech can be scored
    against the planted transcript.
    """

    def __init__(self, centroids: np.ndarray, unit_labels: np.ndarray, min_run: int = 2):
        self.centroids = np.asarray(centroids, dtype=np.float64)
        self.unit_labels = np.asarray(unit_labels, dtype=np.int64)
        self.min_run = min_run

    @classmethod
    def fit(cls, centroids, frames, frame_labels, min_run: int = 2) -> "UnitRecognizer":
        centroids = np.asarray(centroids, dtype=np.float64)
        units = _nearest(centroids, frames)
        labels = np.asarray(frame_labels, dtype=np.int64)
        table = np.zeros(len(centroids), dtype=np.int64)
        fallback = int(np.bincount(labels).argmax())
        for k in range(len(centroids)):
            hit = labels[units == k]
            table[k] = np.bincount(hit).argmax() if hit.size else fallback
        return cls(centroids, table, min_run)

    def frame_labels(self, frames) -> np.ndarray:
        return self.unit_labels[_nearest(self.centroids, frames)]

    def transcribe_ids(self, frames) -> list[int]:
        return collapse_runs(self.frame_labels(frames), self.min_run)

    def transcribe(self, frames) -> str:
        return " ".join(f"p{i}" for i in self.transcribe_ids(frames))


def _nearest(centroids: np.ndarray, frames) -> np.ndarray:
    x = np.asarray(frames, dtype=np.float64)
    d = (x**2).sum(1)[:, None] - 2 * x @ centroids.T + (centroids**2).sum(1)[None, :]
    return d.argmin(axis=1)
