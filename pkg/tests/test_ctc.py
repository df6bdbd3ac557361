import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nam2speech import ctc
from nam2speech import numerics as nx
from nam2speech.numerics import Tensor

from .oracles import best_path_ctc_nll, brute_force_ctc_nll


def lattice(r, T, V):
    logits = r.normal(size=(T, V + 1)) * 2
    return logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)


def test_single_frame_single_label():
    lp = lattice(np.random.default_rng(0), 1, 3)
    assert ctc.ctc_loss(lp, [2]) == pytest.approx(-lp[0, 2], abs=1e-14)


def test_matches_brute_force_t4_v2():
    r = np.random.default_rng(1)
    for labels in ([1], [2], [1, 2], [1, 1], [2, 1, 2]):
        lp = lattice(r, 4, 2)
        assert ctc.ctc_loss(lp, labels) == pytest.approx(brute_force_ctc_nll(lp, labels), abs=1e-10)


def test_repeated_labels_need_a_blank():
    lp = lattice(np.random.default_rng(2), 2, 2)
    res = ctc.ctc_forward_backward(lp, [1, 1])
    assert res.loss == np.inf and not res.feasible
    assert ctc.ctc_loss(lp, [1, 1]) == np.inf
    assert ctc.min_frames([1, 1]) == 3


def test_empty_labels_is_all_blank_path():
    lp = lattice(np.random.default_rng(3), 4, 2)
    assert ctc.ctc_loss(lp, []) == pytest.approx(-lp[:, 0].sum(), abs=1e-12)


def test_label_range_checked():
    lp = lattice(np.random.default_rng(4), 3, 2)
    with pytest.raises(ValueError):
        ctc.ctc_loss(lp, [0])
    with pytest.raises(ValueError):
        ctc.ctc_loss(lp, [3])


def test_loss_not_above_best_single_path():
    r = np.random.default_rng(5)
    for _ in range(50):
        T, V = int(r.integers(1, 6)), int(r.integers(1, 4))
        L = int(r.integers(0, min(3, T) + 1))
        labels = list(r.integers(1, V + 1, L))
        lp = lattice(r, T, V)
        loss = ctc.ctc_loss(lp, labels)
        if np.isfinite(loss):
            assert loss <= best_path_ctc_nll(lp, labels) + 1e-12


def test_extreme_log_probs_stay_finite():
    r = np.random.default_rng(6)
    lp = r.uniform(-700, 0, size=(30, 5))
    lp[:, 0] = 0.0
    res = ctc.ctc_forward_backward(lp, [1, 2, 3, 4])
    assert np.isfinite(res.loss)
    assert np.all(np.isfinite(ctc.ctc_grad(lp, [1, 2, 3, 4])))


# ---- gradient -----------------------------------------------------------------------


def test_single_path_gradient():
    lp = lattice(np.random.default_rng(7), 1, 3)
    g = ctc.ctc_grad(lp, [2])
    expected = np.zeros_like(lp)
    expected[0, 2] = -1.0
    assert np.allclose(g, expected, atol=1e-12)
    # through a softmax the row picks up the renormalisation term
    logits = Tensor(lp, requires_grad=True)
    nx.backward(ctc.ctc_loss_op(nx.log_softmax(logits), [2]))
    assert np.allclose(logits.grad, np.exp(lp) + expected, atol=1e-12)


def test_gradient_matches_finite_differences():
    r = np.random.default_rng(8)
    for _ in range(30):
        T, V = int(r.integers(2, 6)), int(r.integers(1, 4))
        labels = list(r.integers(1, V + 1, int(r.integers(1, 3))))
        if ctc.min_frames(labels) > T:
            continue
        lp = lattice(r, T, V)
        assert nx.grad_check(lambda x: ctc.ctc_loss_op(x, labels), lp) < 1e-4
        logits = r.normal(size=(T, V + 1))
        assert nx.grad_check(lambda x: ctc.ctc_loss_op(nx.log_softmax(x), labels), logits) < 1e-4


def test_logit_gradient_rows_sum_to_zero():
    r = np.random.default_rng(9)
    logits = Tensor(r.normal(size=(6, 4)), requires_grad=True)
    nx.backward(ctc.ctc_loss_op(nx.log_softmax(logits), [1, 3, 3]))
    assert np.allclose(logits.grad.sum(axis=1), 0.0, atol=1e-12)


def test_gradient_of_infeasible_raises():
    lp = lattice(np.random.default_rng(10), 1, 2)
    with pytest.raises(ValueError):
        ctc.ctc_grad(lp, [1, 1])


# ---- decoding ---------------------------------------------------------------------------


def onehot_lattice(path, V):
    lp = np.full((len(path), V + 1), -30.0)
    lp[np.arange(len(path)), path] = 0.0
    return lp


def test_greedy_collapse_rule():
    assert ctc.greedy_decode(onehot_lattice([0, 1, 1, 0, 2], 2)) == [1, 2]


def test_greedy_all_blank():
    assert ctc.greedy_decode(onehot_lattice([0, 0, 0], 2)) == []


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=6))
def test_greedy_recovers_planted_labels(labels):
    path = []
    for k in labels:
        path += [0, k, k]
    path.append(0)
    assert ctc.greedy_decode(onehot_lattice(path, 4)) == labels
