"""CTC loss, its gradient and greedy decoding.

Lattices are (T, V+1) matrices of log-probabilities with the blank at
column 0; labels are ids in [1, V].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, custom_op

BLANK = 0


@dataclass
class CtcResult:
    loss: float
    feasible: bool
    log_alpha: np.ndarray | None = None
    log_beta: np.ndarray | None = None


def _lse(a, b, c):
    return np.logaddexp(np.logaddexp(a, b), c)


def _shift(x: np.ndarray, k: int) -> np.ndarray:
    """x moved k places right (k > 0) or left (k < 0), padded with -inf."""
    out = np.full_like(x, -np.inf)
    if k > 0:
        out[k:] = x[:-k] if k < len(x) else out[k:]
    elif k < 0:
        out[:k] = x[-k:] if -k < len(x) else out[:k]
    return out


def extend_labels(labels) -> np.ndarray:
    ext = np.zeros(2 * len(labels) + 1, dtype=np.int64)
    ext[1::2] = labels
    return ext


def min_frames(labels) -> int:
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _skip_allowed(ext: np.ndarray) -> np.ndarray:
    allowed = np.zeros(len(ext), dtype=bool)
    allowed[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return allowed


def _check(lattice, labels):
    lp = np.asarray(lattice, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.int64)
    if lp.ndim != 2:
        raise ValueError(f"lattice must be (T, V+1), got {lp.shape}")
    if lab.size and (lab.min() < 1 or lab.max() >= lp.shape[1]):
        raise ValueError(f"labels must lie in [1, {lp.shape[1] - 1}]")
    return lp, lab


def ctc_forward_backward(lattice, labels) -> CtcResult:
    lp, lab = _check(lattice, labels)
    T = lp.shape[0]
    if T < min_frames(lab):
        return CtcResult(np.inf, False)
    ext = extend_labels(lab)
    S = len(ext)
    skip = _skip_allowed(ext)
    emit = lp[:, ext]  # (T, S)
    neg = -np.inf
    alpha = np.full((T, S), neg)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        s1 = _shift(prev, 1)
        s2 = np.where(skip, _shift(prev, 2), neg)
        alpha[t] = _lse(prev, s1, s2) + emit[t]
    beta = np.full((T, S), neg)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    skip_next = np.zeros(S, dtype=bool)  # may s jump to s+2
    skip_next[: max(S - 2, 0)] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        n1 = _shift(nxt, -1)
        n2 = np.where(skip_next, _shift(nxt, -2), neg)
        beta[t] = _lse(nxt, n1, n2) + emit[t]
    ends = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    return CtcResult(float(-ends), True, alpha, beta)


def ctc_loss(lattice, labels) -> float:
    """Negative log-likelihood of ``labels``; +inf when no alignment fits."""
    return ctc_forward_backward(lattice, labels).loss


def ctc_grad(lattice, labels) -> np.ndarray:
    """d loss / d lattice, treating every log-probability as a free variable.

    Equals minus the posterior occupancy of each (frame, symbol).
    """
    lp, lab = _check(lattice, labels)
    return _grad_from(lp, lab, ctc_forward_backward(lp, lab))


def _grad_from(lp: np.ndarray, lab: np.ndarray, res: CtcResult) -> np.ndarray:
    if not res.feasible:
        raise ValueError("CTC alignment infeasible: too few frames for the labels")
    ext = extend_labels(lab)
    # alpha and beta both include the emission at t
    occ = res.log_alpha + res.log_beta - lp[:, ext] + res.loss
    grad = np.zeros_like(lp)
    for s, k in enumerate(ext):
        grad[:, k] -= np.exp(occ[:, s])
    return grad


def ctc_loss_op(log_probs: Tensor, labels) -> Tensor:
    """CTC negative log-likelihood as a differentiable graph node."""
    lp, lab = _check(log_probs.data, labels)
    res = ctc_forward_backward(lp, lab)
    g = _grad_from(lp, lab, res)
    return custom_op(np.array(res.loss), (log_probs,), lambda up: (float(up) * g,), "ctc_loss")


def greedy_decode(lattice) -> list[int]:
    best = np.asarray(lattice).argmax(axis=1)
    out = []
    prev = None
    for k in best:
        if k != prev and k != BLANK:
            out.append(int(k))
        prev = k
    return out
