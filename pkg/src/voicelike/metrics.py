"""Evaluation measures: regression errors, correlations, classification scores,
embedding similarity, equal error rate and character error rate."""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import rankdata


def _pair(p, t):
    p = np.asarray(p, dtype=np.float64).ravel()
    t = np.asarray(t, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} vs {t.size}")
    return p, t


def mse(p, t) -> float:
    p, t = _pair(p, t)
    if p.size == 0:
        raise ValueError("mse of empty sequences")
    return float(np.mean((p - t) ** 2))


def _exact_ints(x) -> list[int]:
    """Integers proportional to ``x`` (one common power-of-two scale), exactly."""
    if not np.all(np.isfinite(x)):
        raise ValueError("correlation of non-finite values")
    m, e = np.frexp(x)
    mant = (m * 2.0 ** 53).astype(np.int64).tolist()
    e = (e - 53).tolist()
    lo = min(e)
    return [v << (k - lo) for v, k in zip(mant, e)]


def _ratio_sqrt(num: int, den: int) -> float:
    """``num / sqrt(den)`` correctly rounded to float64, for integers, ``den > 0``."""
    bits = 128
    r = math.isqrt((num * num << (2 * bits)) // den) / (1 << bits)
    return -r if num < 0 else r


def pearson_lcc(p, t) -> float:
    """Pearson correlation, correctly rounded.

    The centred moments are accumulated exactly in integer arithmetic, so the
    only rounding is the final one; the result does not depend on summation
    order or on the magnitude of the means.
    """
    p, t = _pair(p, t)
    n = p.size
    if n < 2:
        raise ValueError("correlation needs at least two samples")
    x, y = _exact_ints(p), _exact_ints(t)
    sx, sy = sum(x), sum(y)
    sxy = n * sum(a * b for a, b in zip(x, y)) - sx * sy
    sxx = n * sum(a * a for a in x) - sx * sx
    syy = n * sum(b * b for b in y) - sy * sy
    if sxx == 0 or syy == 0:
        raise ValueError("correlation undefined for a constant sequence")
    return _ratio_sqrt(sxy, sxx * syy)


def spearman_srcc(p, t) -> float:
    """Pearson correlation of average ranks (ties share the mean rank)."""
    p, t = _pair(p, t)
    return pearson_lcc(rankdata(p), rankdata(t))


def kendall_tau(p, t) -> float:
    """Kendall tau-b, counted exactly over all pairs."""
    p, t = _pair(p, t)
    n = p.size
    if n < 2:
        raise ValueError("correlation needs at least two samples")
    iu = np.triu_indices(n, k=1)
    sp = np.sign(p[:, None] - p[None, :])[iu]
    st = np.sign(t[:, None] - t[None, :])[iu]
    prod = sp * st
    concordant = int(np.count_nonzero(prod > 0))
    discordant = int(np.count_nonzero(prod < 0))
    untied_p = int(np.count_nonzero(sp))
    untied_t = int(np.count_nonzero(st))
    if untied_p == 0 or untied_t == 0:
        raise ValueError("tau-b undefined when one sequence is entirely tied")
    return _ratio_sqrt(concordant - discordant, untied_p * untied_t)


def accuracy_f1(pred_labels, true_labels, positive="liked") -> tuple[float, float]:
    """Accuracy and F1 of the ``positive`` class; F1 is 0 when precision + recall is 0."""
    pred_labels, true_labels = list(pred_labels), list(true_labels)
    if len(pred_labels) != len(true_labels):
        raise ValueError("length mismatch")
    if not pred_labels:
        raise ValueError("no labels")
    tp = fp = fn = tn = 0
    for y_hat, y in zip(pred_labels, true_labels):
        if y_hat == positive:
            if y == positive:
                tp += 1
            else:
                fp += 1
        elif y == positive:
            fn += 1
        else:
            tn += 1
    accuracy = (tp + tn) / len(pred_labels)
    f1 = 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)
    return accuracy, f1


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def error_rates(genuine, impostor, threshold) -> tuple[float, float]:
    """(FAR, FRR) when accepting scores ``>= threshold``."""
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.asarray(impostor, dtype=np.float64)
    far = np.count_nonzero(impostor >= threshold) / impostor.size
    frr = np.count_nonzero(genuine < threshold) / genuine.size
    return far, frr


def compute_eer(genuine, impostor) -> tuple[float, float]:
    """Equal error rate by sweeping every observed score as a threshold.

    At the candidate minimising ``|FAR - FRR|`` (lowest one on ties) the EER is
    the mean of the two rates. The rates are constant on the interval between
    that candidate and the next-lower observed score, and the midpoint of that
    interval is returned as the threshold.
    """
    genuine = np.asarray(genuine, dtype=np.float64).ravel()
    impostor = np.asarray(impostor, dtype=np.float64).ravel()
    if genuine.size == 0 or impostor.size == 0:
        raise ValueError("EER needs both genuine and impostor scores")
    cands = np.unique(np.concatenate([genuine, impostor]))
    g_sorted, i_sorted = np.sort(genuine), np.sort(impostor)
    n_g, n_i = genuine.size, impostor.size
    # rejected genuine / accepted impostor counts; compared on a common denominator
    miss = np.searchsorted(g_sorted, cands, side="left").astype(np.int64)
    fa = (n_i - np.searchsorted(i_sorted, cands, side="left")).astype(np.int64)
    i = int(np.argmin(np.abs(fa * n_g - miss * n_i)))
    eer = (int(fa[i]) * n_g + int(miss[i]) * n_i) / (2 * n_g * n_i)
    threshold = cands[i] if i == 0 else (cands[i - 1] + cands[i]) / 2
    return float(eer), float(threshold)


def edit_distance(ref, hyp) -> int:
    """Unit-cost Levenshtein distance between two sequences."""
    ref, hyp = list(ref), list(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def cer(reference, hypothesis) -> float:
    """Edit distance over the reference length.

    Strings are compared per Unicode code point; any other sequence (e.g. unit
    ids) per element.
    """
    if len(reference) == 0:
        raise ValueError("reference must be non-empty")
    return edit_distance(reference, hypothesis) / len(reference)
