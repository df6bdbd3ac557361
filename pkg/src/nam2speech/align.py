"""Forced alignment, DTW and duration utilities.

The aligner is a left-to-right HMM with one diagonal-Gaussian state per
phoneme, trained by hard (Viterbi) EM. A state emits one frame per step and
either loops or exits; every segment, including the last, pays one exit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

VAR_FLOOR = 1e-3
# self-loop probability is kept inside [P_MIN, 1 - P_MIN]
P_MIN = 1e-3


class AlignmentError(ValueError):
    """Infeasible alignment or malformed input."""


@dataclass
class PhonemeSeq:
    ids: np.ndarray
    inventory_size: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.size == 0:
            raise ValueError("phoneme sequence is empty")
        if self.ids.min() < 0 or self.ids.max() >= self.inventory_size:
            raise ValueError(f"phoneme id out of inventory [0, {self.inventory_size})")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Durations:
    frames: np.ndarray
    frame_rate: float = 50.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64)
        if self.frames.ndim != 1 or np.any(self.frames < 1):
            raise ValueError("durations must be a 1-D vector of positive frame counts")

    @property
    def total(self) -> int:
        return int(self.frames.sum())

    def __len__(self) -> int:
        return len(self.frames)

    def to_json(self, phonemes: Sequence[int]) -> str:
        return json.dumps({
            "phonemes": [int(p) for p in phonemes],
            "durations": [int(d) for d in self.frames],
            "frame_rate": float(self.frame_rate),
        })

    @classmethod
    def from_json(cls, text: str) -> tuple["Durations", list[int]]:
        obj = json.loads(text)
        return cls(obj["durations"], obj["frame_rate"]), list(obj["phonemes"])


@dataclass
class MonophoneHMM:
    means: np.ndarray  # (P, D)
    variances: np.ndarray  # (P, D)
    log_self: np.ndarray  # (P,)
    log_exit: np.ndarray  # (P,)
    loglik_history: list[float] = field(default_factory=list)

    @property
    def inventory_size(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def log_emissions(self, features: np.ndarray, ids: np.ndarray) -> np.ndarray:
        """(T, N) Gaussian log-densities of every frame under each position's phone."""
        mu = self.means[ids]
        var = self.variances[ids]
        diff = features[:, None, :] - mu[None, :, :]
        return -0.5 * (np.log(2 * np.pi * var)[None] + diff**2 / var[None]).sum(axis=-1)

    def save(self, path) -> None:
        np.savez(path, means=self.means, variances=self.variances,
                 log_self=self.log_self, log_exit=self.log_exit,
                 loglik_history=np.asarray(self.loglik_history))

    @classmethod
    def load(cls, path) -> "MonophoneHMM":
        z = np.load(path)
        return cls(z["means"], z["variances"], z["log_self"], z["log_exit"],
                   list(z["loglik_history"]))


def _viterbi(hmm: MonophoneHMM, features: np.ndarray, ids: np.ndarray) -> tuple[np.ndarray, float]:
    T, N = len(features), len(ids)
    if T < N:
        raise AlignmentError(f"infeasible alignment: {T} frames for {N} phonemes")
    em = hmm.log_emissions(features, ids)
    stay = hmm.log_self[ids]
    leave = hmm.log_exit[ids]
    score = np.full(N, -np.inf)
    score[0] = em[0, 0]
    back = np.zeros((T, N), dtype=bool)  # True: entered from previous state
    for t in range(1, T):
        from_stay = score + stay
        from_prev = np.full(N, -np.inf)
        from_prev[1:] = score[:-1] + leave[:-1]
        back[t] = from_prev > from_stay
        score = np.where(back[t], from_prev, from_stay) + em[t]
    best = score[N - 1] + leave[N - 1]
    if not np.isfinite(best):
        raise AlignmentError("no finite-probability alignment")
    durations = np.zeros(N, dtype=np.int64)
    s = N - 1
    for t in range(T - 1, -1, -1):
        durations[s] += 1
        if t > 0 and back[t, s]:
            s -= 1
    return durations, float(best)


def path_loglik(hmm: MonophoneHMM, features: np.ndarray, ids: np.ndarray, durations) -> float:
    """Log-probability of one explicit segmentation (used by tests and EM)."""
    em = hmm.log_emissions(features, ids)
    t, total = 0, 0.0
    for k, d in enumerate(durations):
        total += em[t : t + d, k].sum() + (d - 1) * hmm.log_self[ids[k]] + hmm.log_exit[ids[k]]
        t += d
    return float(total)


def viterbi_align(hmm: MonophoneHMM, features, phonemes: PhonemeSeq, frame_rate: float = 50.0) -> Durations:
    feats = np.asarray(features, dtype=np.float64)
    durations, _ = _viterbi(hmm, feats, phonemes.ids)
    return Durations(durations, frame_rate)


def uniform_segmentation(T: int, N: int) -> np.ndarray:
    edges = np.floor(np.arange(N + 1) * T / N).astype(np.int64)
    return np.diff(edges)


def _m_step(corpus, segmentations, P: int, D: int, prev: MonophoneHMM | None) -> MonophoneHMM:
    sums = np.zeros((P, D))
    sq = np.zeros((P, D))
    n = np.zeros(P)
    loops = np.zeros(P)
    exits = np.zeros(P)
    for (feats, seq), durs in zip(corpus, segmentations):
        t = 0
        for p, d in zip(seq.ids, durs):
            seg = feats[t : t + d]
            sums[p] += seg.sum(axis=0)
            sq[p] += (seg**2).sum(axis=0)
            n[p] += d
            loops[p] += d - 1
            exits[p] += 1
            t += d
    means = prev.means.copy() if prev is not None else np.zeros((P, D))
    variances = prev.variances.copy() if prev is not None else np.ones((P, D))
    p_self = np.exp(prev.log_self) if prev is not None else np.full(P, 0.5)
    seen = n > 0
    means[seen] = sums[seen] / n[seen, None]
    variances[seen] = np.maximum(sq[seen] / n[seen, None] - means[seen] ** 2, VAR_FLOOR)
    p_self[seen] = np.clip(loops[seen] / (loops[seen] + exits[seen]), P_MIN, 1 - P_MIN)
    return MonophoneHMM(means, variances, np.log(p_self), np.log1p(-p_self))


def train_aligner(corpus, iterations: int = 10, inventory_size: int | None = None,
                  seed: int = 0) -> MonophoneHMM:
    """Viterbi-EM over (features, PhonemeSeq) pairs, starting from uniform segments.

    ``seed`` is accepted for interface symmetry; training is deterministic.
    The summed best-path log-likelihood of every iteration is stored in
    ``loglik_history`` and never decreases.
    """
    corpus = [(np.asarray(f, dtype=np.float64), s) for f, s in corpus]
    if not corpus:
        raise AlignmentError("empty corpus")
    for i, (f, s) in enumerate(corpus):
        if len(f) < len(s):
            raise AlignmentError(f"utterance {i}: {len(f)} frames for {len(s)} phonemes")
    P = inventory_size or corpus[0][1].inventory_size
    D = corpus[0][0].shape[1]
    segs = [uniform_segmentation(len(f), len(s)) for f, s in corpus]
    hmm = _m_step(corpus, segs, P, D, None)
    history = []
    for _ in range(iterations):
        total = 0.0
        segs = []
        for f, s in corpus:
            d, ll = _viterbi(hmm, f, s.ids)
            segs.append(d)
            total += ll
        history.append(total)
        if len(history) > 1 and history[-1] < history[-2] - 1e-9 * max(1.0, abs(history[-2])):
            raise AssertionError("Viterbi-EM log-likelihood decreased")
        hmm = _m_step(corpus, segs, P, D, hmm)
    hmm.loglik_history = history
    return hmm


# --- DTW ------------------------------------------------------------------------


@dataclass
class DtwPath:
    path: list[tuple[int, int]]
    cost: float


def dtw(a, b) -> DtwPath:
    """Globally optimal monotone alignment under steps (1,0), (0,1), (1,1) with L2 cost."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("dtw inputs must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dtw: feature dim mismatch {a.shape[1]} vs {b.shape[1]}")
    local = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))
    n, m = local.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = local[i - 1, j - 1] + min(acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
    path = [(n - 1, m - 1)]
    i, j = n, m
    while (i, j) != (1, 1):
        # prefer the diagonal on ties
        options = [(acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1)]
        _, i, j = min(options, key=lambda o: o[0])
        path.append((i - 1, j - 1))
    path.reverse()
    cost = float(sum(local[p] for p in path))
    return DtwPath(path, cost)


# --- durations ------------------------------------------------------------------


def upsample_durations(durations: Durations, factor: int = 2) -> Durations:
    if int(factor) != factor or factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    return Durations(durations.frames * int(factor), durations.frame_rate * factor)


def length_regulate(embeddings, durations) -> np.ndarray:
    """Repeat row i of ``embeddings`` durations[i] times."""
    emb = np.asarray(embeddings)
    d = durations.frames if isinstance(durations, Durations) else np.asarray(durations, dtype=np.int64)
    if len(emb) != len(d):
        raise ValueError(f"length mismatch: {len(emb)} embeddings vs {len(d)} durations")
    return np.repeat(emb, d, axis=0)
