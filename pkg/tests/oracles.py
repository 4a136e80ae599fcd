"""Independent oracles used by the test suite.

Everything here recomputes expected values by a route separate from the
library code: central finite differences for gradients, mpmath extended
precision for formulas, and naive loops for aggregate bookkeeping.
"""

import math

import mpmath
import numpy as np

mpmath.mp.dps = 50


def fd_grad(f, tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. one tensor's entries."""
    base = tensor.data
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = f()
        flat[i] = keep - eps
        lo = f()
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def assert_close_rel(actual, expected, rel: float, abs_floor: float = 1e-12):
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(actual), np.abs(expected)), abs_floor)
    err = np.abs(actual - expected) / denom
    worst = float(err.max())
    assert worst <= rel, f"relative error {worst:.3e} exceeds {rel:.1e}"


def softmax_mp(values):
    """Softmax computed at 50 decimal digits."""
    vs = [mpmath.mpf(float(v)) for v in values]
    m = max(vs)
    es = [mpmath.e ** (v - m) for v in vs]
    s = sum(es)
    return [float(e / s) for e in es]


def single_head_mp(w_q, w_k, w_v, w_o, x, q, scale_dim):
    """Direct attention formula at 50 decimal digits; returns float64 vector."""
    to_mp = lambda a: mpmath.matrix([[mpmath.mpf(float(v)) for v in row] for row in np.atleast_2d(a)])
    W_q, W_k, W_v, W_o = map(to_mp, (w_q, w_k, w_v, w_o))
    X = to_mp(x)
    qv = mpmath.matrix([mpmath.mpf(float(v)) for v in q])
    n = X.rows
    qp = W_q * qv
    scores = []
    for i in range(n):
        xi = mpmath.matrix([X[i, j] for j in range(X.cols)])
        ki = W_k * xi
        scores.append(sum(qp[j] * ki[j] for j in range(len(ki))) / mpmath.sqrt(scale_dim))
    m = max(scores)
    es = [mpmath.e ** (s - m) for s in scores]
    z = sum(es)
    alphas = [e / z for e in es]
    d_h = W_v.rows
    ctx = mpmath.matrix([mpmath.mpf(0)] * d_h)
    for i in range(n):
        xi = mpmath.matrix([X[i, j] for j in range(X.cols)])
        vi = W_v * xi
        for j in range(d_h):
            ctx[j] += alphas[i] * vi[j]
    out = W_o * ctx
    return np.array([float(out[i]) for i in range(out.rows)])


def t_test_p_mp(a, b) -> float:
    """Two-sided paired t-test p at 50 digits via mpmath's incomplete beta."""
    d = [mpmath.mpf(float(y)) - mpmath.mpf(float(x)) for x, y in zip(a, b)]
    n = len(d)
    mean = sum(d) / n
    var = sum((v - mean) ** 2 for v in d) / (n - 1)
    t = mean / mpmath.sqrt(var / n)
    df = n - 1
    x = df / (df + t * t)
    p = mpmath.betainc(df / mpmath.mpf(2), mpmath.mpf(1) / 2, 0, x, regularized=True)
    return float(p)


def pearson_mp(xs, ys) -> tuple:
    """Pearson r and two-sided p at 50 digits."""
    x = [mpmath.mpf(float(v)) for v in xs]
    y = [mpmath.mpf(float(v)) for v in ys]
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    r = sxy / mpmath.sqrt(sxx * syy)
    t = r * mpmath.sqrt((n - 2) / (1 - r * r))
    df = n - 2
    xx = df / (df + t * t)
    p = mpmath.betainc(df / mpmath.mpf(2), mpmath.mpf(1) / 2, 0, xx, regularized=True)
    return float(r), float(p)


def bleu_mp(stat_rows) -> float:
    """Corpus BLEU from summed sufficient stats at 50 digits (0.1 smoothing)."""
    stats = [mpmath.mpf(float(float(v))) for v in np.asarray(stat_rows).sum(axis=0)]
    hyp_len, ref_len = stats[-2], stats[-1]
    if hyp_len <= 0:
        return 0.0
    log_p = mpmath.mpf(0)
    for n in range(1, 5):
        matches = stats[n - 1]
        total = max(stats[4 + n - 1], mpmath.mpf(1))
        if matches <= 0:
            if n == 1:
                return 0.0
            matches = mpmath.mpf("0.1")
        log_p += mpmath.log(matches / total)
    bp = mpmath.mpf(1) if hyp_len > ref_len else mpmath.e ** (1 - ref_len / hyp_len)
    return float(100 * bp * mpmath.e ** (log_p / 4))


def matmul_loops(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Naive triple-loop matrix product."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out
