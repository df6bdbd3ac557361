import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from nam2speech import align as al
from nam2speech import synthdata as sd

from .oracles import all_segmentations, brute_force_dtw_cost, monotone_paths


def seq(ids, P=None):
    return al.PhonemeSeq(ids, P or max(ids) + 1)


def random_hmm(r, P, D):
    p_self = r.uniform(0.2, 0.9, P)
    return al.MonophoneHMM(r.normal(size=(P, D)), r.uniform(0.3, 2.0, (P, D)), np.log(p_self), np.log1p(-p_self))


def independent_score(hmm, feats, ids, durs):
    """Segmentation log-probability from scipy densities."""
    total, t = 0.0, 0
    for k, d in zip(ids, durs):
        total += norm.logpdf(feats[t : t + d], hmm.means[k], np.sqrt(hmm.variances[k])).sum()
        total += (d - 1) * hmm.log_self[k] + hmm.log_exit[k]
        t += d
    return total


# ---- types ---------------------------------------------------------------------------


def test_phoneme_seq_invariants():
    with pytest.raises(ValueError):
        al.PhonemeSeq([], 3)
    with pytest.raises(ValueError):
        al.PhonemeSeq([0, 3], 3)


def test_durations_invariants_and_json():
    with pytest.raises(ValueError):
        al.Durations([2, 0, 1])
    d = al.Durations([3, 1, 4])
    obj = json.loads(d.to_json([5, 6, 7]))
    assert obj == {"phonemes": [5, 6, 7], "durations": [3, 1, 4], "frame_rate": 50.0}
    back, ph = al.Durations.from_json(d.to_json([5, 6, 7]))
    assert np.array_equal(back.frames, d.frames) and ph == [5, 6, 7]


# ---- training ---------------------------------------------------------------------------


def test_single_phoneme_mean_is_feature_mean():
    f = np.random.default_rng(0).normal(size=(9, 4))
    hmm = al.train_aligner([(f, seq([0]))], iterations=3)
    assert np.allclose(hmm.means[0], f.mean(axis=0), atol=1e-12)


def test_constraints_hold_after_training():
    c = sd.gen_corpus(3, 10)
    hmm = al.train_aligner([(u.whisper_feats, u.text) for u in c], iterations=4)
    assert np.all(hmm.variances >= al.VAR_FLOOR)
    assert np.allclose(np.exp(hmm.log_self) + np.exp(hmm.log_exit), 1.0, atol=1e-12)


def test_learned_means_near_planted_means():
    c = sd.gen_corpus(7, 50)
    hmm = al.train_aligner([(u.whisper_feats, u.text) for u in c])
    sigma = c.params["sigma_w"]
    assert np.max(np.abs(hmm.means - c.inventory.templates)) < 0.2 * sigma


def test_training_is_deterministic_and_monotone():
    c = sd.gen_corpus(5, 15)
    data = [(u.nam_feats, u.text) for u in c]
    a = al.train_aligner(data, iterations=6)
    b = al.train_aligner(data, iterations=6)
    assert np.array_equal(a.means, b.means) and a.loglik_history == b.loglik_history
    h = a.loglik_history
    assert all(y >= x - 1e-9 * abs(x) for x, y in zip(h, h[1:]))


def test_training_errors():
    with pytest.raises(al.AlignmentError):
        al.train_aligner([])
    with pytest.raises(al.AlignmentError):
        al.train_aligner([(np.zeros((2, 3)), seq([0, 1, 2]))])


def test_model_save_load(tmp_path):
    hmm = random_hmm(np.random.default_rng(1), 4, 3)
    hmm.loglik_history = [-5.0, -4.0]
    hmm.save(tmp_path / "h.npz")
    back = al.MonophoneHMM.load(tmp_path / "h.npz")
    assert np.array_equal(back.means, hmm.means) and back.loglik_history == [-5.0, -4.0]


# ---- Viterbi alignment -----------------------------------------------------------------


def test_single_phoneme_takes_every_frame():
    hmm = random_hmm(np.random.default_rng(2), 3, 2)
    d = al.viterbi_align(hmm, np.zeros((7, 2)), seq([1], 3))
    assert d.frames.tolist() == [7]


def test_two_phonemes_match_exhaustive_enumeration():
    r = np.random.default_rng(3)
    for _ in range(20):
        hmm = random_hmm(r, 2, 2)
        f = r.normal(size=(6, 2))
        ids = np.array([0, 1])
        segs = list(all_segmentations(6, 2))
        assert len(segs) == 5
        best = max(segs, key=lambda s: independent_score(hmm, f, ids, s))
        got = al.viterbi_align(hmm, f, al.PhonemeSeq(ids, 2)).frames.tolist()
        assert independent_score(hmm, f, ids, got) == pytest.approx(independent_score(hmm, f, ids, best), abs=1e-9)


def test_longer_sequences_match_exhaustive_enumeration():
    r = np.random.default_rng(4)
    for _ in range(20):
        hmm = random_hmm(r, 3, 2)
        ids = r.integers(0, 3, 4)
        f = r.normal(size=(8, 2))
        best = max(independent_score(hmm, f, ids, s) for s in all_segmentations(8, 4))
        got = al.viterbi_align(hmm, f, al.PhonemeSeq(ids, 3)).frames
        assert independent_score(hmm, f, ids, got) == pytest.approx(best, abs=1e-9)


def test_infeasible_alignment():
    hmm = random_hmm(np.random.default_rng(5), 3, 2)
    with pytest.raises(al.AlignmentError):
        al.viterbi_align(hmm, np.zeros((2, 2)), seq([0, 1, 2]))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 6), st.integers(0, 10))
def test_viterbi_output_is_valid_durations(seed, n, extra):
    r = np.random.default_rng(seed)
    hmm = random_hmm(r, 4, 3)
    T = n + extra
    d = al.viterbi_align(hmm, r.normal(size=(T, 3)) * 3, al.PhonemeSeq(r.integers(0, 4, n), 4))
    assert len(d) == n and d.total == T and d.frames.min() >= 1


def test_fuzz_thousand_random_models():
    r = np.random.default_rng(6)
    for _ in range(1000):
        n = int(r.integers(1, 5))
        T = n + int(r.integers(0, 6))
        hmm = random_hmm(r, 3, 2)
        d = al.viterbi_align(hmm, r.normal(size=(T, 2)), al.PhonemeSeq(r.integers(0, 3, n), 3))
        assert d.total == T and d.frames.min() >= 1


def test_planted_durations_recovered():
    c = sd.gen_corpus(7, 50)
    hmm = al.train_aligner([(u.whisper_feats, u.text) for u in c])
    hits = total = 0
    for u in c:
        d = al.viterbi_align(hmm, u.whisper_feats, u.text)
        hits += int(np.sum(np.abs(d.frames - u.durations.frames) <= 1))
        total += len(d)
    assert hits / total >= 0.9


# ---- DTW ------------------------------------------------------------------------------


def test_identical_sequences_diagonal_zero_cost():
    a = np.random.default_rng(7).normal(size=(6, 3))
    res = al.dtw(a, a)
    assert res.cost == 0.0 and res.path == [(i, i) for i in range(6)]


def test_dtw_matches_brute_force():
    r = np.random.default_rng(8)
    for _ in range(100):
        a = r.normal(size=(int(r.integers(1, 6)), 2))
        b = r.normal(size=(int(r.integers(1, 6)), 2))
        res = al.dtw(a, b)
        assert res.cost == pytest.approx(brute_force_dtw_cost(a, b), abs=1e-12)


def test_dtw_path_invariants_and_symmetry():
    r = np.random.default_rng(9)
    for _ in range(50):
        a, b = r.normal(size=(int(r.integers(1, 9)), 3)), r.normal(size=(int(r.integers(1, 9)), 3))
        res = al.dtw(a, b)
        assert res.path[0] == (0, 0) and res.path[-1] == (len(a) - 1, len(b) - 1)
        steps = {(j[0] - i[0], j[1] - i[1]) for i, j in zip(res.path, res.path[1:])}
        assert steps <= {(1, 0), (0, 1), (1, 1)}
        local = sum(np.linalg.norm(a[i] - b[j]) for i, j in res.path)
        assert res.cost == pytest.approx(local, abs=1e-12)
        assert res.cost == pytest.approx(al.dtw(b, a).cost, abs=1e-12)


def test_dtw_no_worse_than_diagonal():
    r = np.random.default_rng(10)
    for _ in range(50):
        n = int(r.integers(1, 10))
        a, b = r.normal(size=(n, 2)), r.normal(size=(n, 2))
        assert al.dtw(a, b).cost <= np.linalg.norm(a - b, axis=1).sum() + 1e-12


def test_dtw_errors():
    with pytest.raises(ValueError):
        al.dtw(np.zeros((3, 2)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        al.dtw(np.zeros((0, 2)), np.zeros((3, 2)))


def test_oracle_path_count_is_delannoy():
    # sanity check on the brute-force oracle itself
    assert len(list(monotone_paths(3, 3))) == 13


# ---- durations and length regulation ------------------------------------------------------


def test_upsample_examples():
    assert al.upsample_durations(al.Durations([3, 1, 4]), 2).frames.tolist() == [6, 2, 8]
    d = al.Durations([2, 5], 25.0)
    same = al.upsample_durations(d, 1)
    assert same.frames.tolist() == [2, 5] and same.frame_rate == 25.0
    with pytest.raises(ValueError):
        al.upsample_durations(d, 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 20), min_size=1, max_size=15), st.integers(1, 5))
def test_upsample_sum_scales_exactly(frames, k):
    d = al.Durations(frames, 25.0)
    up = al.upsample_durations(d, k)
    assert up.total == k * d.total and up.frame_rate == 25.0 * k


def test_length_regulate_examples():
    e = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(al.length_regulate(e, [1, 1]), e)
    out = al.length_regulate(e, al.Durations([2, 3]))
    assert np.array_equal(out, e[[0, 0, 1, 1, 1]])
    with pytest.raises(ValueError):
        al.length_regulate(e, [1, 2, 3])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=10))
def test_length_regulate_group_average_inverts(durs):
    x = np.random.default_rng(len(durs)).normal(size=(len(durs), 3))
    y = al.length_regulate(x, durs)
    assert len(y) == sum(durs)
    edges = np.cumsum([0] + durs)
    groups = [y[a:b] for a, b in zip(edges, edges[1:])]
    assert all(np.array_equal(g, np.broadcast_to(xi, g.shape)) for g, xi in zip(groups, x))
    back = np.stack([g.mean(axis=0) for g in groups])
    np.testing.assert_array_max_ulp(back, x, maxulp=4)
