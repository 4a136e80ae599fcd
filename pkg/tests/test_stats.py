import numpy as np
import pytest

from headlab.stats import (
    SignificanceResult,
    bleu_from_stats,
    bleu_sentence_stats,
    classification_accuracy,
    corpus_bleu,
    paired_bootstrap,
    paired_t_test,
    pearson,
    sequence_accuracy,
    student_t_sf,
)
from oracles import bleu_mp, pearson_mp, t_test_p_mp


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def test_bleu_perfect_match_is_100():
    refs = [[1, 2, 3, 4, 5], [7, 8, 9, 10]]
    score, stats = corpus_bleu(refs, refs)
    assert score == pytest.approx(100.0, abs=1e-12)
    assert stats.shape == (2, 10)


def test_bleu_disjoint_vocab_below_smoothed_floor():
    hyp = [[1, 2, 3, 4]]
    ref = [[5, 6, 7, 8]]
    score, _ = corpus_bleu(hyp, ref)
    assert 0.0 <= score < 1.0


def test_bleu_hand_computed_example():
    # hyp "the the the cat" vs ref "the cat sat down"; value frozen from a
    # 50-digit evaluation of the clipped-precision/brevity-penalty formula.
    hyp = ["the", "the", "the", "cat"]
    ref = ["the", "cat", "sat", "down"]
    score, _ = corpus_bleu([hyp], [ref])
    assert score == 16.990442448471224


def test_bleu_brevity_penalty_applies_to_short_hypotheses():
    full, _ = corpus_bleu([[1, 2, 3, 4]], [[1, 2, 3, 4]])
    short, _ = corpus_bleu([[1, 2, 3]], [[1, 2, 3, 4]])
    assert short < full


def test_bleu_permutation_invariance_and_range():
    rng = np.random.default_rng(0)
    hyps = [list(rng.integers(0, 8, size=rng.integers(2, 9))) for _ in range(12)]
    refs = [list(rng.integers(0, 8, size=rng.integers(2, 9))) for _ in range(12)]
    base, _ = corpus_bleu(hyps, refs)
    order = rng.permutation(12)
    shuffled, _ = corpus_bleu([hyps[i] for i in order], [refs[i] for i in order])
    assert base == shuffled
    assert 0.0 <= base <= 100.0


def test_bleu_matches_extended_precision_on_random_corpora():
    rng = np.random.default_rng(1)
    for _ in range(10):
        n = int(rng.integers(2, 8))
        hyps = [list(rng.integers(0, 6, size=rng.integers(1, 10))) for _ in range(n)]
        refs = [list(rng.integers(0, 6, size=rng.integers(2, 10))) for _ in range(n)]
        score, stats = corpus_bleu(hyps, refs)
        assert score == pytest.approx(bleu_mp(stats), abs=1e-9)


def test_bleu_empty_hypothesis_scores_zero():
    score, _ = corpus_bleu([[]], [[1, 2]])
    assert score == 0.0


def test_bleu_errors():
    with pytest.raises(ValueError, match="mismatch"):
        corpus_bleu([[1]], [[1], [2]])
    with pytest.raises(ValueError, match="empty"):
        corpus_bleu([], [])
    with pytest.raises(ValueError, match="non-empty"):
        corpus_bleu([[1]], [[]])


# ---------------------------------------------------------------------------
# accuracies
# ---------------------------------------------------------------------------


def test_accuracy_trivial_extremes():
    score, per = sequence_accuracy([[1, 2], [3]], [[1, 2], [3]])
    assert score == 100.0 and per.tolist() == [100.0, 100.0]
    score, _ = sequence_accuracy([[1], [2]], [[9], [8]])
    assert score == 0.0
    score, _ = classification_accuracy([0, 1], [1, 0])
    assert score == 0.0
    score, _ = classification_accuracy([0, 1, 1, 0], [0, 1, 0, 0])
    assert score == 75.0


def test_accuracy_matches_manual_tally():
    rng = np.random.default_rng(2)
    hyps = [list(rng.integers(0, 3, size=4)) for _ in range(20)]
    refs = [list(rng.integers(0, 3, size=4)) for _ in range(20)]
    score, per = sequence_accuracy(hyps, refs)
    manual = sum(1 for h, r in zip(hyps, refs) if h == r)
    assert score == pytest.approx(100.0 * manual / 20)
    assert per.mean() == pytest.approx(score)


def test_accuracy_length_mismatch_errors():
    with pytest.raises(ValueError):
        sequence_accuracy([[1]], [[1], [2]])
    with pytest.raises(ValueError):
        classification_accuracy([1], [1, 2])


# ---------------------------------------------------------------------------
# paired bootstrap
# ---------------------------------------------------------------------------


def test_bootstrap_identical_systems_not_significant():
    scores = np.array([50.0, 100.0, 0.0, 100.0, 50.0])
    res = paired_bootstrap(scores, scores, n_resamples=500, seed=3)
    assert res.p_value == 1.0
    assert not res.significant_at_01


def test_bootstrap_strict_dominance_hits_resolution_floor():
    rng = np.random.default_rng(4)
    a = rng.normal(size=30)
    b = a + 1.0
    res = paired_bootstrap(a, b, n_resamples=1000, seed=5)
    assert res.p_value < 1.0 / 1000
    assert res.significant_at_01


def test_bootstrap_p_is_multiple_of_resolution_and_deterministic():
    rng = np.random.default_rng(6)
    a = rng.normal(size=40)
    b = a + rng.normal(scale=0.7, size=40)
    r1 = paired_bootstrap(a, b, n_resamples=250, seed=7)
    r2 = paired_bootstrap(a, b, n_resamples=250, seed=7)
    assert r1.p_value == r2.p_value
    assert (r1.p_value * 250) == int(round(r1.p_value * 250))


def test_bootstrap_antisymmetry_up_to_ties():
    rng = np.random.default_rng(8)
    a = rng.normal(size=50)
    b = a + rng.normal(scale=0.5, size=50)
    fwd = paired_bootstrap(a, b, n_resamples=400, seed=9).p_value
    rev = paired_bootstrap(b, a, n_resamples=400, seed=9).p_value
    # With continuous scores ties have probability ~0, so the two one-sided
    # p-values complement each other exactly.
    assert fwd + rev == pytest.approx(1.0, abs=1e-12)


def test_bootstrap_sufficient_stats_aggregate_for_bleu():
    rng = np.random.default_rng(10)
    refs = [list(rng.integers(0, 6, size=6)) for _ in range(15)]
    hyp_a = [r[:4] + [0, 0] for r in refs]
    hyp_b = [list(r) for r in refs]
    _, stats_a = corpus_bleu(hyp_a, refs)
    _, stats_b = corpus_bleu(hyp_b, refs)
    res = paired_bootstrap(
        stats_a, stats_b, n_resamples=300, seed=11, aggregate=lambda rows: bleu_from_stats(rows.sum(axis=0))
    )
    assert res.p_value < 0.01


def test_bootstrap_errors():
    with pytest.raises(ValueError, match="shape"):
        paired_bootstrap([1.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError, match="at least 2"):
        paired_bootstrap([1.0], [2.0])


def test_bootstrap_null_calibration():
    # Two systems drawn from the same distribution: p < 0.01 should be
    # declared in at most ~1% of trials; allow 2% as the hard bound.
    rng = np.random.default_rng(12)
    hits = 0
    trials = 1000
    for t in range(trials):
        a = rng.normal(size=40)
        b = rng.normal(size=40)
        res = paired_bootstrap(a, b, n_resamples=200, seed=t)
        if res.p_value < 0.01:
            hits += 1
    assert hits <= 0.02 * trials


# ---------------------------------------------------------------------------
# paired t-test
# ---------------------------------------------------------------------------


def test_t_test_identical_is_degenerate():
    a = np.array([1.0, 2.0, 3.0])
    res = paired_t_test(a, a)
    assert res.p_value == 1.0
    assert res.degenerate
    assert not res.significant_at_01


def test_t_test_constant_shift_tiny_noise():
    rng = np.random.default_rng(13)
    a = rng.normal(size=100)
    b = a + 1.0 + rng.normal(scale=1e-3, size=100)
    res = paired_t_test(a, b)
    assert res.p_value < 1e-6
    assert res.degrees_of_freedom == 99


def test_t_test_matches_extended_precision():
    rng = np.random.default_rng(14)
    for _ in range(25):
        n = int(rng.integers(5, 60))
        a = rng.normal(size=n)
        b = a + rng.normal(scale=1.0, size=n) + rng.normal() * 0.2
        res = paired_t_test(a, b)
        assert res.p_value == pytest.approx(t_test_p_mp(a, b), abs=1e-9)


def test_student_t_sf_symmetry():
    assert student_t_sf(0.0, 5) == pytest.approx(0.5, abs=1e-15)
    assert student_t_sf(2.3, 7) + student_t_sf(-2.3, 7) == pytest.approx(1.0, abs=1e-14)


# ---------------------------------------------------------------------------
# Pearson correlation
# ---------------------------------------------------------------------------


def test_pearson_affine_and_negation():
    xs = np.array([1.0, 2.0, 4.0, 7.0, 11.0])
    r, p = pearson(xs, 2 * xs + 1)
    assert r == pytest.approx(1.0, abs=1e-12)
    assert p == 0.0
    r, p = pearson(xs, -xs)
    assert r == pytest.approx(-1.0, abs=1e-12)
    assert p == 0.0


def test_pearson_matches_extended_precision():
    rng = np.random.default_rng(15)
    xs = rng.normal(size=50)
    ys = 0.6 * xs + rng.normal(scale=0.8, size=50)
    r, p = pearson(xs, ys)
    r_mp, p_mp = pearson_mp(xs, ys)
    assert r == pytest.approx(r_mp, abs=1e-12)
    assert p == pytest.approx(p_mp, abs=1e-9)


def test_pearson_errors():
    with pytest.raises(ValueError, match="at least 3"):
        pearson([1.0, 2.0], [1.0, 2.0])
    with pytest.raises(ValueError, match="zero-variance"):
        pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])


def test_significance_result_threshold_consistency():
    assert SignificanceResult(0.009, "x").significant_at_01
    assert not SignificanceResult(0.01, "x").significant_at_01
