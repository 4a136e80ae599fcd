"""Metrics and significance machinery shared by every experiment.

Corpus BLEU-4 with additive smoothing, exact-match accuracies, paired
bootstrap resampling, the paired t-test, and Pearson correlation. The
t-distribution survival function is computed in-house via the regularized
incomplete beta function so no external statistics package acts as ground
truth at runtime.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BLEU_SMOOTH_EPS",
    "EvalResult",
    "SignificanceResult",
    "corpus_bleu",
    "bleu_sentence_stats",
    "bleu_from_stats",
    "sequence_accuracy",
    "classification_accuracy",
    "paired_bootstrap",
    "paired_t_test",
    "pearson",
    "student_t_sf",
]

BLEU_SMOOTH_EPS = 0.1
_MAX_ORDER = 4


@dataclass
class EvalResult:
    """A metric score plus the per-example payload paired tests need.

    ``per_example`` rows aggregate back to ``score`` under ``aggregate``:
    the mean for accuracy metrics, corpus BLEU over summed sufficient
    statistics for BLEU.
    """

    metric: str
    score: float
    per_example: np.ndarray
    n_examples: int

    def aggregate(self, rows: np.ndarray) -> float:
        if self.metric == "bleu":
            return bleu_from_stats(rows.sum(axis=0))
        return float(rows.mean())


@dataclass
class SignificanceResult:
    p_value: float
    test: str
    n_resamples: int = 0
    degrees_of_freedom: int = 0
    degenerate: bool = False

    @property
    def significant_at_01(self) -> bool:
        return self.p_value < 0.01


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def _ngram_counts(tokens, order: int) -> Counter:
    return Counter(tuple(tokens[i : i + order]) for i in range(len(tokens) - order + 1))


def bleu_sentence_stats(hypothesis, reference) -> np.ndarray:
    """Sufficient statistics for one sentence pair.

    Layout: clipped matches for orders 1..4, hypothesis n-gram totals for
    orders 1..4, hypothesis length, reference length.
    """
    stats = np.zeros(2 * _MAX_ORDER + 2)
    hyp = list(hypothesis)
    ref = list(reference)
    for n in range(1, _MAX_ORDER + 1):
        hyp_counts = _ngram_counts(hyp, n)
        ref_counts = _ngram_counts(ref, n)
        stats[n - 1] = sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
        stats[_MAX_ORDER + n - 1] = max(len(hyp) - n + 1, 0)
    stats[-2] = len(hyp)
    stats[-1] = len(ref)
    return stats


def bleu_from_stats(stats: np.ndarray) -> float:
    """Corpus BLEU-4 in [0, 100] from (summed) sufficient statistics.

    Zero match counts for orders >= 2 are smoothed by adding 0.1 to the
    numerator; unigrams are not smoothed, so zero unigram overlap scores 0.
    """
    hyp_len, ref_len = stats[-2], stats[-1]
    if hyp_len <= 0:
        return 0.0
    log_prec = 0.0
    for n in range(1, _MAX_ORDER + 1):
        matches = stats[n - 1]
        total = max(stats[_MAX_ORDER + n - 1], 1.0)
        if matches <= 0:
            if n == 1:
                return 0.0
            matches = BLEU_SMOOTH_EPS
        log_prec += math.log(matches / total)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_prec / _MAX_ORDER)


def corpus_bleu(hypotheses, references) -> tuple[float, np.ndarray]:
    """BLEU-4 with brevity penalty over a corpus of token sequences.

    Returns the score and the (n, 10) matrix of per-sentence sufficient
    statistics used by the paired bootstrap.
    """
    if len(hypotheses) != len(references):
        raise ValueError(
            f"corpus size mismatch: {len(hypotheses)} hypotheses, {len(references)} references"
        )
    if not references:
        raise ValueError("empty corpus")
    if any(len(r) == 0 for r in references):
        raise ValueError("references must be non-empty")
    stats = np.stack([bleu_sentence_stats(h, r) for h, r in zip(hypotheses, references)])
    return bleu_from_stats(stats.sum(axis=0)), stats


# ---------------------------------------------------------------------------
# accuracies
# ---------------------------------------------------------------------------


def sequence_accuracy(hypotheses, references) -> tuple[float, np.ndarray]:
    """Exact-match fraction x 100; per-example entries are 0 or 100."""
    if len(hypotheses) != len(references):
        raise ValueError(
            f"length mismatch: {len(hypotheses)} hypotheses, {len(references)} references"
        )
    if not references:
        raise ValueError("empty corpus")
    per = np.array(
        [100.0 if list(h) == list(r) else 0.0 for h, r in zip(hypotheses, references)]
    )
    return float(per.mean()), per


def classification_accuracy(predictions, labels) -> tuple[float, np.ndarray]:
    """Fraction of matching labels x 100; per-example entries are 0 or 100."""
    if len(predictions) != len(labels):
        raise ValueError(f"length mismatch: {len(predictions)} predictions, {len(labels)} labels")
    if not len(labels):
        raise ValueError("empty corpus")
    per = np.array([100.0 if p == y else 0.0 for p, y in zip(predictions, labels)])
    return float(per.mean()), per


# ---------------------------------------------------------------------------
# paired bootstrap
# ---------------------------------------------------------------------------


def _as_rows(x) -> np.ndarray:
    rows = np.asarray(x, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[:, None]
    return rows


def paired_bootstrap(
    per_example_a,
    per_example_b,
    n_resamples: int = 1000,
    seed: int = 0,
    aggregate=None,
    two_sided: bool = False,
) -> SignificanceResult:
    """Paired bootstrap over example indices.

    One-sided by default: evidence that system B beats system A, with
    p = fraction of resamples in which B's aggregate fails to strictly
    exceed A's. Identical systems therefore report p = 1 and strict
    dominance reports p = 0 (below the 1/n_resamples resolution floor).
    ``two_sided`` runs both directions and doubles the smaller p.

    Rows may be scalars (aggregate defaults to the mean) or sufficient-stat
    vectors with a matching ``aggregate`` callable (corpus BLEU resamples
    aggregate per-sentence statistics, not per-sentence scores).
    """
    a = _as_rows(per_example_a)
    b = _as_rows(per_example_b)
    if a.shape != b.shape:
        raise ValueError(f"paired inputs differ in shape: {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n < 2:
        raise ValueError("paired bootstrap needs at least 2 examples")
    if aggregate is None:
        aggregate = lambda rows: float(rows.mean())

    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(n_resamples, n))
    b_not_better = 0
    a_not_better = 0
    for r in range(n_resamples):
        take = idx[r]
        score_a = aggregate(a[take])
        score_b = aggregate(b[take])
        if not score_b > score_a:
            b_not_better += 1
        if not score_a > score_b:
            a_not_better += 1
    p_b_beats_a = b_not_better / n_resamples
    if not two_sided:
        return SignificanceResult(p_b_beats_a, "paired_bootstrap", n_resamples=n_resamples)
    p = min(1.0, 2.0 * min(p_b_beats_a, a_not_better / n_resamples))
    return SignificanceResult(p, "paired_bootstrap_two_sided", n_resamples=n_resamples)


# ---------------------------------------------------------------------------
# t distribution (survival function via regularized incomplete beta)
# ---------------------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    # Lentz's continued fraction for the incomplete beta function.
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h


def _betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: int) -> float:
    """P(T > t) for Student's t with df degrees of freedom."""
    if df <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    x = df / (df + t * t)
    p = 0.5 * _betainc_reg(df / 2.0, 0.5, x)
    return p if t >= 0 else 1.0 - p


# ---------------------------------------------------------------------------
# paired t-test and Pearson correlation
# ---------------------------------------------------------------------------


def paired_t_test(per_example_a, per_example_b) -> SignificanceResult:
    """Two-sided paired t-test on per-example score differences."""
    a = np.asarray(per_example_a, dtype=np.float64)
    b = np.asarray(per_example_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired t-test needs equal-length vectors, got {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least 2 examples")
    d = b - a
    sd = d.std(ddof=1)
    if sd == 0.0:
        return SignificanceResult(1.0, "paired_t", degrees_of_freedom=n - 1, degenerate=True)
    t = d.mean() / (sd / math.sqrt(n))
    p = 2.0 * student_t_sf(abs(t), n - 1)
    return SignificanceResult(min(p, 1.0), "paired_t", degrees_of_freedom=n - 1)


def pearson(xs, ys) -> tuple[float, float]:
    """Sample Pearson r and its two-sided p-value (t-transform, n-2 df)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"pearson needs equal-length vectors, got {x.shape} vs {y.shape}")
    n = x.size
    if n < 3:
        raise ValueError("pearson needs at least 3 points")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float((xc * xc).sum()) * float((yc * yc).sum()))
    if denom == 0.0:
        raise ValueError("pearson is undefined for zero-variance input")
    r = float((xc * yc).sum()) / denom
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return r, min(1.0, 2.0 * student_t_sf(abs(t), n - 2))
