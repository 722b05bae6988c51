"""Independent reference implementations used as test oracles.

None of these import the code paths they check: loops instead of
vectorised numpy, brute force instead of sorting tricks, extended precision
instead of float64.
"""

import numpy as np

LD = np.longdouble


# ---------------------------------------------------------------------------
# LSTM loss in extended precision
# ---------------------------------------------------------------------------


def _sig(a):
    return 1 / (1 + np.exp(-a))


def lstm_bce_loss(arrays, x, y, readout="last"):
    """Per-sample BCE of a stacked LSTM, parameter arrays in serialization order."""
    arrays = [np.asarray(a, dtype=LD) for a in arrays]
    seq = np.asarray(x, dtype=LD)
    n_layers = (len(arrays) - 2) // 3
    for k in range(n_layers):
        W, U, b = arrays[3 * k:3 * k + 3]
        H = U.shape[1]
        h = np.zeros(H, dtype=LD)
        c = np.zeros(H, dtype=LD)
        outs = []
        for t in range(seq.shape[0]):
            a = W.dot(seq[t]) + U.dot(h) + b
            i, f = _sig(a[:H]), _sig(a[H:2 * H])
            g, o = np.tanh(a[2 * H:3 * H]), _sig(a[3 * H:])
            c = f * c + i * g
            h = o * np.tanh(c)
            outs.append(h)
        seq = np.array(outs)
    r = seq[-1] if readout == "last" else seq.mean(axis=0)
    z = arrays[-2].dot(r) + arrays[-1][0]
    return np.log1p(np.exp(z)) - LD(y) * z


def finite_difference_grads(arrays, x, y, step=1e-5, readout="last"):
    """Central differences of :func:`lstm_bce_loss` for every parameter entry."""
    base = [np.asarray(a, dtype=LD) for a in arrays]
    out = []
    h = LD(step)
    for ai, a in enumerate(base):
        g = np.empty(a.shape, dtype=np.float64)
        for idx in np.ndindex(a.shape):
            plus = [q.copy() for q in base]
            minus = [q.copy() for q in base]
            plus[ai][idx] += h
            minus[ai][idx] -= h
            diff = lstm_bce_loss(plus, x, y, readout) - lstm_bce_loss(minus, x, y, readout)
            g[idx] = float(diff / (2 * h))
        out.append(g)
    return out


def max_relative_error(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64).ravel()
        n = np.asarray(n, dtype=np.float64).ravel()
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-300)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


# ---------------------------------------------------------------------------
# Exhaustive threshold sweep
# ---------------------------------------------------------------------------


def brute_confusion(scores, labels, thr):
    tp = tn = fp = fn = 0
    for s, y in zip(scores, labels):
        accept = s >= thr
        if y == 1 and accept:
            tp += 1
        elif y == 1:
            fn += 1
        elif accept:
            fp += 1
        else:
            tn += 1
    return tp, tn, fp, fn


def brute_roc(scores, labels):
    """(threshold, fpr, tpr, tp, fp) rows, thresholds descending with sentinels."""
    distinct = sorted(set(float(s) for s in scores), reverse=True)
    thresholds = [np.nextafter(distinct[0], np.inf)] + distinct + [np.nextafter(distinct[-1], -np.inf)]
    P = sum(1 for y in labels if y == 1)
    N = len(labels) - P
    rows = []
    for t in thresholds:
        tp, tn, fp, fn = brute_confusion(scores, labels, t)
        rows.append((t, fp / N, tp / P, tp, fp))
    return rows, P, N


def brute_auc(scores, labels):
    """Probability a positive outscores a negative, ties counted half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def brute_eer(rows):
    """Walk consecutive ROC segments; intersect the first one reaching FPR = 1 - TPR."""
    for (t0, x0, y0, *_), (t1, x1, y1, *_) in zip(rows, rows[1:]):
        f0 = x0 - (1 - y0)
        f1 = x1 - (1 - y1)
        if f0 == 0:
            return x0, t0
        if f0 < 0 <= f1:
            # Solve x0 + s (x1 - x0) = 1 - (y0 + s (y1 - y0)) for s.
            s = (1 - y0 - x0) / ((x1 - x0) + (y1 - y0))
            return x0 + s * (x1 - x0), t0 + s * (t1 - t0)
    raise AssertionError("no crossing")


def brute_threshold(rows, P, N):
    best = None
    for t, fpr, tpr, tp, fp in rows:
        key = (tp * N - fp * P, -fp, t)
        if best is None or key > best[0]:
            best = (key, t)
    return best[1]
